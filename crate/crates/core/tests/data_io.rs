use sparseq::data::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_idx, parse_idx_images, parse_idx_labels,
    save_checkpoint, synth_dataset, write_idx_images, write_idx_labels, Dataset, CHECKPOINT_VERSION,
};
use sparseq::numerics::{Rng, Tensor4};
use sparseq::quant::BitWidth;
use sparseq::sparsity::SparsityPattern;
use sparseq::vit::{QuantState, ViTConfig, ViTModel};
use sparseq::Error;

fn small_config() -> ViTConfig {
    ViTConfig {
        image_h: 8,
        image_w: 8,
        channels: 1,
        patch: 4,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        classes: 3,
        stages: vec![1, 2],
    }
}

/// Masked, quantized and frozen, so every checkpoint section is populated.
fn compressed_model(cfg: ViTConfig, seed: u64) -> ViTModel {
    let mut m = ViTModel::build(cfg, &mut Rng::new(seed)).unwrap();
    m.select_masks(SparsityPattern::TwoOfFour).unwrap();
    m.prune_weights();
    let n = m.sparsifiable_layers().len();
    m.set_quant(QuantState {
        bits: BitWidth::Int8,
        act_scales: (0..n).map(|i| 0.01 * (i + 1) as f32).collect(),
        weight_scales: None,
    })
    .unwrap();
    m.freeze_quant().unwrap();
    m
}

#[test]
fn standard_test_file_loads_as_10k_28x28() {
    // same layout as the MNIST test split: 10000 images of 28x28 and labels
    let mut rng = Rng::new(0);
    let n = 10_000;
    let pixels: Vec<f32> = (0..n * 28 * 28).map(|_| rng.below(256) as f32 / 255.0).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
    let dir = tempfile::tempdir().unwrap();
    let (xi, yi) = (dir.path().join("t10k-images-idx3-ubyte"), dir.path().join("t10k-labels-idx1-ubyte"));
    let x = Tensor4::from_vec(n, 1, 28, 28, pixels).unwrap();
    std::fs::write(&xi, write_idx_images(&x).unwrap()).unwrap();
    std::fs::write(&yi, write_idx_labels(&labels).unwrap()).unwrap();
    assert_eq!(std::fs::metadata(&xi).unwrap().len(), 16 + 10_000 * 784);

    let d = load_idx(&xi, Some(&yi), 10).unwrap();
    let t = d.images();
    assert_eq!((t.n, t.c, t.h, t.w), (10_000, 1, 28, 28));
    assert_eq!(t.data(), x.data());
    assert_eq!(d.labels().unwrap(), &labels[..]);

    let padded = d.pad_to(32, 32).unwrap();
    assert_eq!((padded.images().h, padded.images().w), (32, 32));
    let sum = |t: &Tensor4| t.data().iter().map(|&v| v as f64).sum::<f64>();
    assert_eq!(sum(padded.images()), sum(t));
}

#[test]
fn idx_structural_errors() {
    let x = Tensor4::from_vec(3, 1, 2, 2, vec![0.5; 12]).unwrap();
    let img = write_idx_images(&x).unwrap();
    let lab = write_idx_labels(&[0, 1, 2]).unwrap();
    // images where labels are expected and vice versa
    assert!(parse_idx_labels(&img).is_err());
    assert!(parse_idx_images(&lab).is_err());
    // trailing byte
    let mut long = img.clone();
    long.push(0);
    assert!(matches!(parse_idx_images(&long), Err(Error::Format { .. })));
    // count mismatch and out-of-range labels
    let imgs = parse_idx_images(&img).unwrap();
    assert!(Dataset::new(imgs.clone(), Some(vec![0, 1]), 3).is_err());
    assert!(Dataset::new(imgs, Some(vec![0, 1, 3]), 3).is_err());
    // a header claiming 2^32-ish pixels must fail on length, not allocate
    let mut huge = img[..16].to_vec();
    huge[4..8].copy_from_slice(&u32::MAX.to_be_bytes());
    assert!(parse_idx_images(&huge).is_err());
}

#[test]
fn idx_fuzz_never_panics() {
    let mut rng = Rng::new(11);
    let x = Tensor4::from_vec(4, 1, 3, 5, (0..60).map(|i| (i % 7) as f32 / 6.0).collect()).unwrap();
    let img = write_idx_images(&x).unwrap();
    let lab = write_idx_labels(&[1, 0, 3, 2]).unwrap();
    for _ in 0..20_000 {
        for base in [&img, &lab] {
            let mut b = base.clone();
            for _ in 0..1 + rng.below(3) {
                match rng.below(3) {
                    0 => {
                        let i = rng.below(b.len());
                        b[i] = rng.next_u64() as u8;
                    }
                    1 => b.truncate(rng.below(b.len() + 1)),
                    _ => b.push(rng.next_u64() as u8),
                }
                if b.is_empty() {
                    break;
                }
            }
            if let Ok(t) = parse_idx_images(&b) {
                assert_eq!(b.len(), 16 + t.data().len());
                assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            if let Ok(l) = parse_idx_labels(&b) {
                assert_eq!(b.len(), 8 + l.len());
            }
        }
    }
}

#[test]
fn synthetic_task_is_learnable_by_nearest_centroid() {
    let d = synth_dataset(&mut Rng::new(7), 10, 2000, 32, 32).unwrap();
    let (train, test) = d.split_at(1500).unwrap();
    let dim = 32 * 32;
    let mut centroids = vec![vec![0.0f64; dim]; 10];
    let mut counts = [0usize; 10];
    let xs = train.images().data();
    for (i, &y) in train.labels().unwrap().iter().enumerate() {
        counts[y] += 1;
        for (c, &v) in centroids[y].iter_mut().zip(&xs[i * dim..(i + 1) * dim]) {
            *c += v as f64;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        assert!(n > 100, "classes are balanced");
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let xt = test.images().data();
    let labels = test.labels().unwrap();
    let correct = (0..test.len())
        .filter(|&i| {
            let x = &xt[i * dim..(i + 1) * dim];
            let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..10).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == labels[i]
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.80, "nearest-centroid accuracy {acc}");
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let m = compressed_model(ViTConfig::desk(), 1);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&m, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // masks and quantization survive and the model computes the same thing
    assert_eq!(loaded.masks(), m.masks());
    assert!(loaded.masks_hold());
    assert!(loaded.weights_on_grid());
    assert_eq!(loaded.quant(), m.quant());
    let x = synth_dataset(&mut Rng::new(2), 10, 4, 32, 32).unwrap();
    let (la, _) = m.forward(x.images()).unwrap();
    let (lb, _) = loaded.forward(x.images()).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn every_truncation_is_an_error() {
    let bytes = checkpoint_to_bytes(&compressed_model(small_config(), 4));
    for len in 0..bytes.len() {
        assert!(checkpoint_from_bytes(&bytes[..len]).is_err(), "prefix {len} accepted");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(checkpoint_from_bytes(&long).is_err());
}

#[test]
fn checkpoint_corruption_is_detected_or_harmless() {
    let m = compressed_model(small_config(), 5);
    let bytes = checkpoint_to_bytes(&m);

    let mut v = bytes.clone();
    v[4] = CHECKPOINT_VERSION + 1;
    assert!(matches!(checkpoint_from_bytes(&v), Err(Error::Version { .. })));

    // single-byte corruption: either rejected, or a model whose own bytes
    // are exactly the corrupted stream (e.g. a changed weight value)
    let mut rng = Rng::new(6);
    for _ in 0..3000 {
        let mut b = bytes.clone();
        let i = rng.below(b.len());
        b[i] ^= 1 << rng.below(8);
        if let Ok(back) = checkpoint_from_bytes(&b) {
            assert_eq!(checkpoint_to_bytes(&back), b);
        }
    }
}

#[test]
fn unsupervised_data_has_no_labels_to_read() {
    let d = synth_dataset(&mut Rng::new(1), 3, 9, 8, 8).unwrap();
    let bare = Dataset::new(d.images().clone(), None, 3).unwrap();
    assert!(!bare.has_labels());
    assert_eq!(bare.label_reads(), 0);
    // an attempt counts even when there is nothing to read
    assert!(bare.labels().is_none());
    assert_eq!(bare.label_reads(), 1);
}
