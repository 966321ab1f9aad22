//! Datasets and persistence: IDX image files, the synthetic blob task, and
//! the model checkpoint container.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::codec::{PutLe, Reader};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Tensor4};
use crate::quant::BitWidth;
use crate::sparsity::{SparsityMask, SparsityPattern};
use crate::vit::{QuantState, ViTConfig, ViTModel};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]` with optional labels.
///
/// Label access goes through [`Dataset::labels`], which counts reads so
/// callers can prove a code path never looked at them.
#[derive(Debug)]
pub struct Dataset {
    images: Tensor4,
    labels: Option<Vec<usize>>,
    classes: usize,
    label_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            images: self.images.clone(),
            labels: self.labels.clone(),
            classes: self.classes,
            label_reads: AtomicUsize::new(self.label_reads()),
        }
    }
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != images.n {
                return Err(Error::shape(format!("{} labels for {} images", l.len(), images.n)));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= classes) {
                return Err(Error::Range(format!("label {bad} outside 0..{classes}")));
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.images.n
    }

    pub fn is_empty(&self) -> bool {
        self.images.n == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor4 {
        &self.images
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// The labels, counting the access.
    pub fn labels(&self) -> Option<&[usize]> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.labels.as_deref()
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(Error::shape(format!("split at {n} of {}", self.len())));
        }
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&a), self.subset(&b)))
    }

    /// Samples at `idx`, in that order. Labels are copied without counting
    /// as a read.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            label_reads: AtomicUsize::new(0),
        }
    }

    /// Zero-pads every image to `h x w`, centered (extra pixel on the far
    /// side when the margin is odd).
    pub fn pad_to(&self, h: usize, w: usize) -> Result<Dataset> {
        let x = &self.images;
        if h < x.h || w < x.w {
            return Err(Error::shape(format!("cannot pad {}x{} down to {h}x{w}", x.h, x.w)));
        }
        let (top, left) = ((h - x.h) / 2, (w - x.w) / 2);
        let mut out = Tensor4::zeros(x.n, x.c, h, w);
        let src = x.data();
        let dst = out.data_mut();
        for n in 0..x.n {
            for c in 0..x.c {
                for y in 0..x.h {
                    let s = ((n * x.c + c) * x.h + y) * x.w;
                    let d = ((n * x.c + c) * h + y + top) * w + left;
                    dst[d..d + x.w].copy_from_slice(&src[s..s + x.w]);
                }
            }
        }
        Ok(Dataset {
            images: out,
            labels: self.labels.clone(),
            classes: self.classes,
            label_reads: AtomicUsize::new(0),
        })
    }
}

/// Parses an IDX image file (`u8` pixels, three dimensions). Pixels map to
/// `p / 255`.
pub fn parse_idx_images(buf: &[u8]) -> Result<Tensor4> {
    let mut r = Reader::new(buf);
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = r.u32_be("image count")? as usize;
    let h = r.u32_be("row count")? as usize;
    let w = r.u32_be("column count")? as usize;
    let total = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format(4, "declared dimensions overflow"))?;
    let pixels = r.bytes(total, "pixel data")?;
    r.finish()?;
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor4::from_vec(n, 1, h, w, data)
}

/// Parses an IDX label file (`u8` labels, one dimension).
pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(buf);
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = r.u32_be("label count")? as usize;
    let labels = r.bytes(n, "label data")?;
    r.finish()?;
    Ok(labels.iter().map(|&l| l as usize).collect())
}

/// Loads an IDX image file and, optionally, its labels. `classes` bounds
/// the label values.
pub fn load_idx(images: &Path, labels: Option<&Path>, classes: usize) -> Result<Dataset> {
    let x = parse_idx_images(&fs::read(images)?)?;
    let y = match labels {
        Some(p) => Some(parse_idx_labels(&fs::read(p)?)?),
        None => None,
    };
    Dataset::new(x, y, classes)
}

/// Serializes images (rounded to `u8`) in IDX form; the inverse of
/// [`parse_idx_images`] for images on the `k/255` grid.
pub fn write_idx_images(x: &Tensor4) -> Result<Vec<u8>> {
    if x.c != 1 {
        return Err(Error::shape("IDX images are single-channel"));
    }
    let mut out = Vec::with_capacity(16 + x.data().len());
    for v in [IDX_IMAGES_MAGIC, x.n as u32, x.h as u32, x.w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(x.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Range(format!("label {l} exceeds 255")))?);
    }
    Ok(out)
}

/// Knobs of the synthetic blob task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub blobs_per_class: usize,
    /// Std-dev of the per-sample shift of the whole blob layout, in pixels.
    pub jitter: f32,
    pub pixel_noise: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            blobs_per_class: 2,
            jitter: 1.5,
            pixel_noise: 0.1,
        }
    }
}

#[derive(Clone, Copy)]
struct Blob {
    cy: f32,
    cx: f32,
    sigma: f32,
}

/// Class-conditional Gaussian-blob images with default [`SynthParams`].
pub fn synth_dataset(rng: &mut Rng, classes: usize, n: usize, h: usize, w: usize) -> Result<Dataset> {
    synth_dataset_with(rng, classes, n, h, w, SynthParams::default())
}

/// Each class owns a few blobs whose centers and widths are drawn from
/// `rng`; each sample shifts that layout, scales its amplitude and adds
/// pixel noise. Labels cycle through the classes in a shuffled order.
pub fn synth_dataset_with(
    rng: &mut Rng,
    classes: usize,
    n: usize,
    h: usize,
    w: usize,
    p: SynthParams,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::config("image dimensions must be non-zero"));
    }
    let (fh, fw) = (h as f32, w as f32);
    let layouts: Vec<Vec<Blob>> = (0..classes)
        .map(|_| {
            (0..p.blobs_per_class.max(1))
                .map(|_| Blob {
                    cy: rng.uniform(0.2 * fh, 0.8 * fh),
                    cx: rng.uniform(0.2 * fw, 0.8 * fw),
                    sigma: rng.uniform(0.06, 0.12) * fh.min(fw),
                })
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n * h * w);
    for &label in &labels {
        let dy = rng.normal(0.0, p.jitter);
        let dx = rng.normal(0.0, p.jitter);
        let amp = rng.uniform(0.6, 1.0);
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0f32;
                for b in &layouts[label] {
                    let ry = y as f32 - b.cy - dy;
                    let rx = x as f32 - b.cx - dx;
                    v += (-(ry * ry + rx * rx) / (2.0 * b.sigma * b.sigma)).exp();
                }
                let noisy = amp * v + rng.normal(0.0, p.pixel_noise);
                data.push(noisy.clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(Tensor4::from_vec(n, 1, h, w, data)?, Some(labels), classes)
}

const CKPT_MAGIC: &[u8; 4] = b"SPQC";
pub const CHECKPOINT_VERSION: u8 = 1;

fn put_mask(out: &mut Vec<u8>, m: &SparsityMask) {
    out.put_u8(m.pattern().code());
    let mut byte = 0u8;
    for (i, &k) in m.bits().iter().enumerate() {
        if k {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if !m.bits().len().is_multiple_of(8) {
        out.push(byte);
    }
}

/// Serializes a model: config, every parameter tensor, masks and
/// quantization state. Layout in `docs/formats.md`.
pub fn checkpoint_to_bytes(model: &ViTModel) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.put_u8(CHECKPOINT_VERSION);
    for v in [
        cfg.image_h,
        cfg.image_w,
        cfg.channels,
        cfg.patch,
        cfg.dim,
        cfg.depth,
        cfg.heads,
        cfg.mlp_ratio,
        cfg.classes,
    ] {
        out.put_u32(v as u32);
    }
    out.put_u32(cfg.stages.len() as u32);
    for &s in &cfg.stages {
        out.put_u32(s as u32);
    }
    out.put_u32(model.params().len() as u32);
    for p in model.params() {
        out.put_u32(p.rows() as u32);
        out.put_u32(p.cols() as u32);
        for &v in p.data() {
            out.put_f32(v);
        }
    }
    out.put_u32(model.masks().len() as u32);
    for m in model.masks() {
        match m {
            None => out.put_u8(0),
            Some(m) => {
                out.put_u8(1);
                put_mask(&mut out, m);
            }
        }
    }
    match model.quant() {
        None => out.put_u8(0),
        Some(q) => {
            out.put_u8(1);
            out.put_u8(q.bits.bits() as u8);
            for &s in &q.act_scales {
                out.put_f32(s);
            }
            match &q.weight_scales {
                None => out.put_u8(0),
                Some(ws) => {
                    out.put_u8(1);
                    for s in ws {
                        out.put_u32(s.len() as u32);
                        for &v in s {
                            out.put_f32(v);
                        }
                    }
                }
            }
        }
    }
    out
}

fn small(v: u32, limit: u32, what: &str, at: usize) -> Result<usize> {
    if v > limit {
        return Err(Error::format(at, format!("{what} {v} exceeds {limit}")));
    }
    Ok(v as usize)
}

/// Inverse of [`checkpoint_to_bytes`]; validates everything before
/// returning a model.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<ViTModel> {
    let mut r = Reader::new(buf);
    if r.bytes(4, "magic")? != CKPT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u8("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let mut dims = [0usize; 9];
    for d in &mut dims {
        let at = r.pos();
        *d = small(r.u32_le("config field")?, 1 << 16, "config field", at)?;
    }
    let at = r.pos();
    let n_stages = small(r.u32_le("stage count")?, 1 << 12, "stage count", at)?;
    let mut stages = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        let at = r.pos();
        stages.push(small(r.u32_le("stage")?, 1 << 16, "stage", at)?);
    }
    let config = ViTConfig {
        image_h: dims[0],
        image_w: dims[1],
        channels: dims[2],
        patch: dims[3],
        dim: dims[4],
        depth: dims[5],
        heads: dims[6],
        mlp_ratio: dims[7],
        classes: dims[8],
        stages,
    };
    config
        .validate()
        .map_err(|e| Error::format(5, format!("invalid config: {e}")))?;
    let at = r.pos();
    let n_params = small(r.u32_le("parameter count")?, 1 << 20, "parameter count", at)?;
    let mut params = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let at = r.pos();
        let rows = r.u32_le("rows")? as usize;
        let cols = r.u32_le("cols")? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(at, format!("tensor {i} size overflows")))?;
        let data = r.f32_vec(len, "tensor data")?;
        // from_raw keeps every bit pattern, non-finite values included
        params.push(Matrix::from_raw(rows, cols, data));
    }
    let at = r.pos();
    let n_layers = small(r.u32_le("layer count")?, 1 << 20, "layer count", at)?;
    let layer_shapes = crate::vit::layer_shapes(&config);
    if n_layers != layer_shapes.len() {
        return Err(Error::format(at, format!("{n_layers} layers, config has {}", layer_shapes.len())));
    }
    let mut masks = Vec::with_capacity(n_layers);
    for &(rows, cols) in &layer_shapes {
        let at = r.pos();
        match r.u8("mask flag")? {
            0 => masks.push(None),
            1 => {
                let code = r.u8("mask pattern")?;
                let pattern = SparsityPattern::from_code(code)
                    .ok_or_else(|| Error::format(at + 1, format!("unknown pattern code {code}")))?;
                let raw = r.bytes((rows * cols).div_ceil(8), "mask bits")?;
                let bits = (0..rows * cols).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
                let m = SparsityMask::from_bits(rows, cols, bits, pattern)
                    .map_err(|e| Error::format(at, e.to_string()))?;
                masks.push(Some(m));
            }
            f => return Err(Error::format(at, format!("bad mask flag {f}"))),
        }
    }
    let at = r.pos();
    let quant = match r.u8("quant flag")? {
        0 => None,
        1 => {
            let at = r.pos();
            let b = r.u8("bit width")?;
            let bits = BitWidth::from_bits(b as u32)
                .ok_or_else(|| Error::format(at, format!("unsupported bit width {b}")))?;
            let act_scales = r.f32_vec(n_layers, "activation scales")?;
            let at = r.pos();
            let weight_scales = match r.u8("weight scale flag")? {
                0 => None,
                1 => {
                    let mut ws = Vec::with_capacity(n_layers);
                    for _ in 0..n_layers {
                        let n = r.u32_le("scale count")? as usize;
                        ws.push(r.f32_vec(n, "weight scales")?);
                    }
                    Some(ws)
                }
                f => return Err(Error::format(at, format!("bad weight scale flag {f}"))),
            };
            Some(QuantState {
                bits,
                act_scales,
                weight_scales,
            })
        }
        f => return Err(Error::format(at, format!("bad quant flag {f}"))),
    };
    r.finish()?;
    let end = r.pos();
    ViTModel::from_parts(config, params, masks, quant).map_err(|e| match e {
        Error::Format { .. } => e,
        other => Error::format(end, format!("inconsistent checkpoint: {other}")),
    })
}

pub fn save_checkpoint(model: &ViTModel, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ViTModel> {
    checkpoint_from_bytes(&fs::read(path)?)
}
