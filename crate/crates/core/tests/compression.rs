//! The compressed model, its packed layers and the sparse kernels agree.

use sparseq::format::{storage_bits, unpack, ElementFormat, PackedSparseMatrix};
use sparseq::gemm::sparse_gemm;
use sparseq::numerics::{dense_gemm, random_matrix, Dist, Rng};
use sparseq::quant::BitWidth;
use sparseq::vit::{QuantState, ViTConfig, ViTModel};

fn frozen(bits: BitWidth, seed: u64) -> ViTModel {
    let fmt = ElementFormat::from_bit_width(bits);
    let mut m = ViTModel::build(ViTConfig::desk(), &mut Rng::new(seed)).unwrap();
    m.select_masks(fmt.pattern()).unwrap();
    m.prune_weights();
    let n = m.sparsifiable_layers().len();
    m.set_quant(QuantState {
        bits,
        act_scales: vec![0.05; n],
        weight_scales: None,
    })
    .unwrap();
    m.freeze_quant().unwrap();
    m
}

#[test]
fn packed_layers_reproduce_effective_weights() {
    for bits in [BitWidth::Int8, BitWidth::Int4] {
        let fmt = ElementFormat::from_bit_width(bits);
        let m = frozen(bits, 3);
        assert!(m.weights_on_grid());
        let packed = m.pack_layers(fmt).unwrap();
        assert_eq!(packed.len(), m.sparsifiable_layers().len());
        for (i, (name, p)) in packed.iter().enumerate() {
            assert_eq!(name, &m.sparsifiable_layers()[i].name);
            assert_eq!(p.mask().unwrap(), *m.masks()[i].as_ref().unwrap());
            assert_eq!(unpack(p).unwrap(), m.effective_weight(i).unwrap(), "{fmt} {name}");

            let bytes = p.to_bytes();
            assert_eq!(&PackedSparseMatrix::from_bytes(&bytes).unwrap(), p);
            let payload = (p.values().len() + p.metadata().len()) as u64 * 8;
            assert_eq!(payload, storage_bits(p.rows() as u64, p.cols() as u64, fmt, true));
        }
    }
}

#[test]
fn sparse_gemm_on_packed_layers_matches_dense() {
    let mut rng = Rng::new(9);
    for bits in [BitWidth::Int8, BitWidth::Int4] {
        let fmt = ElementFormat::from_bit_width(bits);
        let m = frozen(bits, 4);
        for (i, (name, p)) in m.pack_layers(fmt).unwrap().iter().enumerate() {
            let b = random_matrix(&mut rng, p.cols(), 17, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
            let (c, report) = sparse_gemm(p, &b).unwrap();
            let dense = dense_gemm(&m.effective_weight(i).unwrap(), &b).unwrap();
            assert_eq!(c, dense, "{fmt} {name}");
            assert_eq!(report.macs * 2, (p.rows() * p.cols() * 17) as u64);
        }
    }
}

#[test]
fn fp16_packing_needs_only_masks() {
    let mut m = ViTModel::build(ViTConfig::desk(), &mut Rng::new(5)).unwrap();
    assert!(m.pack_layers(ElementFormat::Fp16).is_err(), "no masks yet");
    m.select_masks(ElementFormat::Fp16.pattern()).unwrap();
    m.prune_weights();
    // integer formats still need frozen quantization
    assert!(m.pack_layers(ElementFormat::Int8).is_err());
    for (i, (_, p)) in m.pack_layers(ElementFormat::Fp16).unwrap().iter().enumerate() {
        let w = m.effective_weight(i).unwrap();
        let back = unpack(p).unwrap();
        for (a, b) in back.data().iter().zip(w.data()) {
            assert_eq!(*a, half::f16::from_f32(*b).to_f32());
        }
    }
}
