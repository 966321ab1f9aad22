//! A small DeiT-style vision transformer built on the [`autodiff`] tape.
//!
//! Pre-norm blocks with separate query/key/value projections, class-token
//! pooling, learned position embeddings. The patch embedding is the strided
//! convolution expressed as a GEMM over [`im2col`] rows.
//!
//! Weights are stored `[out, in]`, so a 2:4 group runs along the input
//! dimension, which is the reduction dimension of the GEMM.
//!
//! [`autodiff`]: crate::autodiff

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::format::{compression_ratio, pack, storage_bits, ElementFormat, PackedSparseMatrix};
use crate::gemm::im2col;
use crate::numerics::{Matrix, Rng, Tensor4};
use crate::quant::{calibrate, fake_quant, on_grid, BitWidth, CalibMethod, Granularity, QuantParams};
use crate::sparsity::{select_mask, validate_mask, zero_dropped, SparsityMask, SparsityPattern};

pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the MLP as a multiple of `dim`.
    pub mlp_ratio: usize,
    pub classes: usize,
    /// 1-based indices of blocks whose outputs are stage taps.
    pub stages: Vec<usize>,
}

impl ViTConfig {
    /// The 32x32 single-channel configuration used for the desk task.
    pub fn desk() -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            channels: 1,
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            classes: 10,
            stages: default_stages(4),
        }
    }

    /// DeiT-Tiny at 224x224.
    pub fn deit_tiny() -> Self {
        Self {
            image_h: 224,
            image_w: 224,
            channels: 3,
            patch: 16,
            dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4,
            classes: 1000,
            stages: default_stages(12),
        }
    }

    pub fn patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn patch_width(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Config(m));
        if [
            self.image_h,
            self.image_w,
            self.channels,
            self.patch,
            self.dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
        ]
        .contains(&0)
        {
            return c("every dimension must be non-zero".into());
        }
        if self.classes < 2 {
            return c(format!("need at least 2 classes, got {}", self.classes));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return c(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return c(format!(
                "{}x{} image not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            ));
        }
        for (what, width) in [
            ("patch width c·p·p", self.patch_width()),
            ("dim", self.dim),
            ("mlp hidden", self.hidden()),
        ] {
            if width % 8 != 0 {
                return c(format!("{what} = {width} is not a multiple of 8"));
            }
        }
        if self.stages.is_empty() {
            return c("at least one stage tap is required".into());
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return c(format!("stages {:?} must be strictly increasing", self.stages));
        }
        if self.stages.iter().any(|&s| s == 0 || s > self.depth) {
            return c(format!("stages {:?} outside 1..={}", self.stages, self.depth));
        }
        Ok(())
    }
}

/// Blocks `L/4, L/2, 3L/4, L`, deduplicated and without zeros.
pub fn default_stages(depth: usize) -> Vec<usize> {
    let mut s: Vec<usize> = [depth / 4, depth / 2, 3 * depth / 4, depth]
        .into_iter()
        .filter(|&b| b > 0)
        .collect();
    s.dedup();
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    PatchEmbed,
    Query,
    Key,
    Value,
    Proj,
    Fc1,
    Fc2,
    Head,
}

/// One sparsifiable linear layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub block: Option<usize>,
    /// Index of the weight in [`ViTModel::params`].
    pub weight: usize,
    pub bias: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Trunc,
    Zeros,
    Ones,
}

struct Layout {
    specs: Vec<(String, usize, usize, Init)>,
    layers: Vec<LayerInfo>,
}

fn layout(cfg: &ViTConfig) -> Layout {
    let mut specs = Vec::new();
    let mut layers = Vec::new();
    let d = cfg.dim;
    let mut linear = |specs: &mut Vec<(String, usize, usize, Init)>, name: String, kind, block, out, inp| {
        let weight = specs.len();
        specs.push((format!("{name}.weight"), out, inp, Init::Trunc));
        specs.push((format!("{name}.bias"), 1, out, Init::Zeros));
        layers.push(LayerInfo {
            name,
            kind,
            block,
            weight,
            bias: weight + 1,
            rows: out,
            cols: inp,
        });
    };
    let norm = |specs: &mut Vec<(String, usize, usize, Init)>, name: &str| {
        specs.push((format!("{name}.weight"), 1, d, Init::Ones));
        specs.push((format!("{name}.bias"), 1, d, Init::Zeros));
    };
    linear(&mut specs, "patch_embed".into(), LayerKind::PatchEmbed, None, d, cfg.patch_width());
    specs.push(("cls_token".into(), 1, d, Init::Trunc));
    specs.push(("pos_embed".into(), cfg.tokens(), d, Init::Trunc));
    for b in 0..cfg.depth {
        norm(&mut specs, &format!("blocks.{b}.norm1"));
        for (kind, n) in [
            (LayerKind::Query, "attn.q"),
            (LayerKind::Key, "attn.k"),
            (LayerKind::Value, "attn.v"),
            (LayerKind::Proj, "attn.proj"),
        ] {
            linear(&mut specs, format!("blocks.{b}.{n}"), kind, Some(b), d, d);
        }
        norm(&mut specs, &format!("blocks.{b}.norm2"));
        linear(&mut specs, format!("blocks.{b}.mlp.fc1"), LayerKind::Fc1, Some(b), cfg.hidden(), d);
        linear(&mut specs, format!("blocks.{b}.mlp.fc2"), LayerKind::Fc2, Some(b), d, cfg.hidden());
    }
    norm(&mut specs, "norm");
    linear(&mut specs, "head".into(), LayerKind::Head, None, cfg.classes, d);
    Layout { specs, layers }
}

/// `(rows, cols)` of every sparsifiable layer, in forward order.
pub fn layer_shapes(cfg: &ViTConfig) -> Vec<(usize, usize)> {
    layout(cfg).layers.iter().map(|l| (l.rows, l.cols)).collect()
}

/// Quantization state of a model under QAT or after freezing.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantState {
    pub bits: BitWidth,
    /// Per-tensor scale of each sparsifiable layer's input activation.
    pub act_scales: Vec<f32>,
    /// Frozen per-output-channel weight scales. `None` while training:
    /// scales are then recomputed from the current weights every forward.
    pub weight_scales: Option<Vec<Vec<f32>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    config: ViTConfig,
    params: Vec<Matrix>,
    names: Vec<String>,
    layers: Vec<LayerInfo>,
    masks: Vec<Option<SparsityMask>>,
    quant: Option<QuantState>,
}

/// Handles produced by [`ViTModel::trace`].
pub struct Trace {
    pub logits: Var,
    /// Token tensors `[batch·tokens, dim]` at each configured stage.
    pub stages: Vec<Var>,
    pub attention: Vec<Var>,
    /// Tape handle of every parameter, aligned with [`ViTModel::params`].
    pub params: Vec<Var>,
    /// Max |x| of each sparsifiable layer's input in this batch.
    pub act_amax: Vec<f32>,
}

impl ViTModel {
    /// Truncated-normal (std 0.02) weights, zero biases, unit norm gains.
    pub fn build(config: ViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let Layout { specs, layers } = layout(&config);
        let mut params = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        for (name, r, c, init) in specs {
            let m = match init {
                Init::Trunc => {
                    let data = (0..r * c).map(|_| rng.truncated_normal(INIT_STD)).collect();
                    Matrix::from_raw(r, c, data)
                }
                Init::Zeros => Matrix::zeros(r, c),
                Init::Ones => Matrix::filled(r, c, 1.0),
            };
            params.push(m);
            names.push(name);
        }
        let masks = vec![None; layers.len()];
        Ok(Self {
            config,
            params,
            names,
            layers,
            masks,
            quant: None,
        })
    }

    /// Rebuilds a model from stored parts; used by checkpoint loading.
    pub fn from_parts(
        config: ViTConfig,
        params: Vec<Matrix>,
        masks: Vec<Option<SparsityMask>>,
        quant: Option<QuantState>,
    ) -> Result<Self> {
        config.validate()?;
        let Layout { specs, layers } = layout(&config);
        if params.len() != specs.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors for a config needing {}",
                params.len(),
                specs.len()
            )));
        }
        for (p, (name, r, c, _)) in params.iter().zip(&specs) {
            if p.shape() != (*r, *c) {
                return Err(Error::shape(format!(
                    "{name}: {:?}, expected {:?}",
                    p.shape(),
                    (r, c)
                )));
            }
        }
        let names = specs.into_iter().map(|s| s.0).collect();
        let mut model = Self {
            config,
            params,
            names,
            layers,
            masks: Vec::new(),
            quant: None,
        };
        model.masks = vec![None; model.layers.len()];
        model.set_masks(masks)?;
        if let Some(q) = quant {
            model.set_quant(q)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    /// Patch embedding, every Q/K/V, attention projection and MLP layer, and
    /// the classifier head, in forward order.
    pub fn sparsifiable_layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn masks(&self) -> &[Option<SparsityMask>] {
        &self.masks
    }

    /// Installs one optional mask per sparsifiable layer. Weights are left
    /// untouched; see [`ViTModel::prune_weights`].
    pub fn set_masks(&mut self, masks: Vec<Option<SparsityMask>>) -> Result<()> {
        if masks.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        for (m, l) in masks.iter().zip(&self.layers) {
            if let Some(m) = m {
                if (m.rows(), m.cols()) != (l.rows, l.cols) {
                    return Err(Error::shape(format!("mask shape for {}", l.name)));
                }
                if !validate_mask(m).is_legal() {
                    return Err(Error::Pattern(format!("illegal mask for {}", l.name)));
                }
            }
        }
        self.masks = masks;
        Ok(())
    }

    /// Selects a fresh magnitude mask for every sparsifiable layer.
    pub fn select_masks(&mut self, pattern: SparsityPattern) -> Result<()> {
        let masks = self
            .layers
            .iter()
            .map(|l| select_mask(&self.params[l.weight], pattern).map(Some))
            .collect::<Result<Vec<_>>>()?;
        self.set_masks(masks)
    }

    /// Sets pruned weights to zero.
    pub fn prune_weights(&mut self) {
        for (l, m) in self.layers.iter().zip(&self.masks) {
            if let Some(m) = m {
                zero_dropped(&mut self.params[l.weight], m);
            }
        }
    }

    /// Mask for each entry of [`ViTModel::params`] (weights of masked
    /// layers only), for the optimizer.
    pub fn param_masks(&self) -> Vec<Option<&SparsityMask>> {
        let mut out = vec![None; self.params.len()];
        for (l, m) in self.layers.iter().zip(&self.masks) {
            out[l.weight] = m.as_ref();
        }
        out
    }

    /// True when every masked weight tensor is zero at its pruned positions.
    pub fn masks_hold(&self) -> bool {
        self.layers.iter().zip(&self.masks).all(|(l, m)| match m {
            Some(m) => self.params[l.weight]
                .data()
                .iter()
                .zip(m.bits())
                .all(|(&w, &k)| k || w == 0.0),
            None => true,
        })
    }

    pub fn quant(&self) -> Option<&QuantState> {
        self.quant.as_ref()
    }

    pub fn quant_mut(&mut self) -> Option<&mut QuantState> {
        self.quant.as_mut()
    }

    pub fn set_quant(&mut self, q: QuantState) -> Result<()> {
        if q.act_scales.len() != self.layers.len() {
            return Err(Error::shape("one activation scale per layer"));
        }
        if q.act_scales.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Range("activation scales must be positive".into()));
        }
        if let Some(ws) = &q.weight_scales {
            if ws.len() != self.layers.len()
                || ws.iter().zip(&self.layers).any(|(s, l)| s.len() != l.rows)
            {
                return Err(Error::shape("one weight scale per output channel"));
            }
            for s in ws {
                QuantParams::new(q.bits, s.clone())?;
            }
        }
        self.quant = Some(q);
        Ok(())
    }

    pub fn clear_quant(&mut self) {
        self.quant = None;
    }

    fn weight_params(&self, layer: usize, masked: &Matrix) -> Result<Option<QuantParams>> {
        let Some(q) = &self.quant else { return Ok(None) };
        Ok(Some(match &q.weight_scales {
            Some(ws) => QuantParams::new(q.bits, ws[layer].clone())?,
            None => calibrate(masked, q.bits, Granularity::PerChannel, CalibMethod::Amax)?.params,
        }))
    }

    /// Snaps every masked weight onto its quantization grid and stores the
    /// per-channel scales, ending QAT.
    pub fn freeze_quant(&mut self) -> Result<()> {
        let Some(q) = &self.quant else {
            return Err(Error::config("model has no quantization state"));
        };
        let bits = q.bits;
        let mut scales = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let w = self.effective_weight(i)?;
            let qp = match &self.quant.as_ref().expect("checked").weight_scales {
                Some(ws) => QuantParams::new(bits, ws[i].clone())?,
                None => calibrate(&w, bits, Granularity::PerChannel, CalibMethod::Amax)?.params,
            };
            let idx = self.layers[i].weight;
            self.params[idx] = fake_quant(&w, &qp)?;
            scales.push(qp.scales);
        }
        self.quant.as_mut().expect("checked").weight_scales = Some(scales);
        Ok(())
    }

    /// True when quantization is frozen and every layer's weights lie on
    /// their grid.
    pub fn weights_on_grid(&self) -> bool {
        let Some(QuantState {
            bits,
            weight_scales: Some(ws),
            ..
        }) = &self.quant
        else {
            return false;
        };
        self.layers.iter().zip(ws).all(|(l, s)| match QuantParams::new(*bits, s.clone()) {
            Ok(q) => on_grid(&self.params[l.weight], &q),
            Err(_) => false,
        })
    }

    /// Weight of layer `i` with its mask applied.
    pub fn effective_weight(&self, i: usize) -> Result<Matrix> {
        let w = &self.params[self.layers[i].weight];
        Ok(match &self.masks[i] {
            Some(m) => crate::sparsity::apply_mask(w, m)?,
            None => w.clone(),
        })
    }

    /// Packs every sparsifiable weight into `fmt`. Integer formats need
    /// frozen quantization with matching bit width; all formats need masks
    /// of the matching pattern.
    pub fn pack_layers(&self, fmt: ElementFormat) -> Result<Vec<(String, PackedSparseMatrix)>> {
        let scales = match (fmt.bit_width(), &self.quant) {
            (None, _) => None,
            (
                Some(bits),
                Some(QuantState {
                    bits: qb,
                    weight_scales: Some(ws),
                    ..
                }),
            ) if bits == *qb => Some(ws),
            (Some(bits), _) => {
                return Err(Error::config(format!(
                    "packing {fmt} needs frozen {}-bit quantization",
                    bits.bits()
                )))
            }
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let mask = self.masks[i]
                .as_ref()
                .ok_or_else(|| Error::Pattern(format!("{} has no mask", l.name)))?;
            let w = self.effective_weight(i)?;
            let qp = match scales {
                Some(ws) => Some(QuantParams::new(
                    fmt.bit_width().expect("integer format"),
                    ws[i].clone(),
                )?),
                None => None,
            };
            out.push((l.name.clone(), pack(&w, mask, fmt, qp.as_ref())?));
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let c = &self.config;
        if (x.c, x.h, x.w) != (c.channels, c.image_h, c.image_w) {
            return Err(Error::shape(format!(
                "input {}x{}x{} for a {}x{}x{} model",
                x.c, x.h, x.w, c.channels, c.image_h, c.image_w
            )));
        }
        if x.n == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. Parameters enter as trainable
    /// leaves when `trainable`, otherwise as constants.
    pub fn trace(&self, tape: &mut Tape, x: &Tensor4, trainable: bool) -> Result<Trace> {
        self.check_input(x)?;
        let cfg = &self.config;
        let n = x.n;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let mut act_amax = vec![0.0f32; self.layers.len()];
        let mut layer = 0usize;
        let mut dense = |tape: &mut Tape, input: Var| -> Result<Var> {
            let info = &self.layers[layer];
            let mut w = params[info.weight];
            if let Some(m) = &self.masks[layer] {
                w = tape.mask_mul(w, m)?;
            }
            let mut input = input;
            act_amax[layer] = tape.value(input).max_abs();
            if let Some(q) = &self.quant {
                let wq = self.weight_params(layer, tape.value(w))?.expect("quant on");
                w = tape.fake_quant(w, &wq)?;
                let aq = QuantParams::per_tensor(q.bits, q.act_scales[layer])?;
                input = tape.fake_quant(input, &aq)?;
            }
            let y = tape.linear(input, w)?;
            layer += 1;
            tape.add_row(y, params[info.bias])
        };
        let patches = tape.constant(im2col(x, cfg.patch)?);
        let e = dense(tape, patches)?;
        let (cls, pos) = (params[2], params[3]);
        let mut h = tape.assemble_tokens(e, cls, pos, n)?;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut attention = Vec::with_capacity(cfg.depth);
        let per_block = 16;
        for b in 0..cfg.depth {
            let base = 4 + b * per_block;
            let y = tape.layer_norm(h, params[base], params[base + 1])?;
            let q = dense(tape, y)?;
            let k = dense(tape, y)?;
            let v = dense(tape, y)?;
            let a = tape.attention(q, k, v, n, cfg.heads)?;
            attention.push(a);
            let o = dense(tape, a)?;
            h = tape.add(h, o)?;
            let y = tape.layer_norm(h, params[base + 10], params[base + 11])?;
            let f = dense(tape, y)?;
            let f = tape.gelu(f);
            let f = dense(tape, f)?;
            h = tape.add(h, f)?;
            if cfg.stages.contains(&(b + 1)) {
                stages.push(h);
            }
        }
        let nb = 4 + cfg.depth * per_block;
        let y = tape.layer_norm(h, params[nb], params[nb + 1])?;
        let t = cfg.tokens();
        let cls_rows = tape.select_rows(y, (0..n).map(|i| i * t).collect())?;
        let logits = dense(tape, cls_rows)?;
        Ok(Trace {
            logits,
            stages,
            attention,
            params,
            act_amax,
        })
    }

    /// Inference: logits `[batch, classes]` and the stage token tensors.
    pub fn forward(&self, x: &Tensor4) -> Result<(Matrix, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let tr = self.trace(&mut tape, x, false)?;
        let stages = tr.stages.iter().map(|&s| tape.value(s).clone()).collect();
        Ok((tape.value(tr.logits).clone(), stages))
    }

    /// Logits only, in chunks of `batch` samples.
    pub fn predict(&self, x: &Tensor4, batch: usize) -> Result<Matrix> {
        let batch = batch.max(1);
        let mut out = Vec::with_capacity(x.n * self.config.classes);
        let mut start = 0;
        while start < x.n {
            let end = (start + batch).min(x.n);
            let idx: Vec<usize> = (start..end).collect();
            let (logits, _) = self.forward(&x.select(&idx))?;
            out.extend_from_slice(logits.data());
            start = end;
        }
        Ok(Matrix::from_raw(x.n, self.config.classes, out))
    }
}

/// Storage regime for [`count_params_flops`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Compression {
    DenseFp32,
    SparseInt8,
    SparseInt4,
}

impl Compression {
    pub fn format(self) -> Option<ElementFormat> {
        match self {
            Compression::DenseFp32 => None,
            Compression::SparseInt8 => Some(ElementFormat::Int8),
            Compression::SparseInt4 => Some(ElementFormat::Int4),
        }
    }

    /// Modeled speedup of a compressed GEMM: 2 from 2:4 sparsity, `32/bits`
    /// from narrower operands, and 4 for the dense-math tensor-core factor.
    pub fn gemm_speedup(self) -> u64 {
        match self.format() {
            None => 1,
            Some(f) => 2 * (32 / f.bits()) * 4,
        }
    }
}

/// Parameter and compute accounting for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCost {
    pub params: u64,
    /// Parameters of sparsifiable weight matrices (biases excluded).
    pub sparsifiable: u64,
    /// Storage in FP32-parameter units.
    pub params_equiv: Ratio<u64>,
    /// Multiply-accumulates of one forward pass on one image.
    pub macs: u64,
    /// `macs` divided by the modeled speedup.
    pub effective_macs: Ratio<u64>,
}

impl ModelCost {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn params_equiv_m(&self) -> f64 {
        ratio_f64(self.params_equiv) / 1e6
    }

    /// FLOPs in the table convention, one multiply-accumulate counted once.
    pub fn flops_g(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    /// Effective FLOPs (modeled), same convention as [`ModelCost::flops_g`].
    pub fn effective_flops_g(&self) -> f64 {
        ratio_f64(self.effective_macs) / 1e9
    }

    pub fn params_ratio(&self) -> Ratio<u64> {
        Ratio::from(self.params) / self.params_equiv
    }

    pub fn flops_ratio(&self) -> Ratio<u64> {
        Ratio::from(self.macs) / self.effective_macs
    }
}

pub fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Closed-form parameter and compute counts.
///
/// Under compression, sparsifiable weights are charged their packed storage
/// bits; every other parameter is charged its FP32 size divided by the
/// format's compression ratio. Every GEMM, attention products included,
/// divides its MACs by [`Compression::gemm_speedup`].
pub fn count_params_flops(cfg: &ViTConfig, compression: Compression) -> Result<ModelCost> {
    cfg.validate()?;
    let Layout { specs, layers } = layout(cfg);
    let params: u64 = specs.iter().map(|(_, r, c, _)| (r * c) as u64).sum();
    let sparsifiable: u64 = layers.iter().map(|l| (l.rows * l.cols) as u64).sum();
    let params_equiv = match compression.format() {
        None => Ratio::from(params),
        Some(f) => {
            let packed: u64 = layers
                .iter()
                .map(|l| storage_bits(l.rows as u64, l.cols as u64, f, true))
                .sum();
            let others = Ratio::from(32 * (params - sparsifiable)) / compression_ratio(f);
            (Ratio::from(packed) + others) / 32
        }
    };
    let (t, d, h) = (cfg.tokens() as u64, cfg.dim as u64, cfg.hidden() as u64);
    let patch = cfg.patches() as u64 * cfg.patch_width() as u64 * d;
    let block = 4 * t * d * d + 2 * t * t * d + 2 * t * d * h;
    let head = d * cfg.classes as u64;
    let macs = patch + cfg.depth as u64 * block + head;
    Ok(ModelCost {
        params,
        sparsifiable,
        params_equiv,
        macs,
        effective_macs: Ratio::new(macs, compression.gemm_speedup()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax;

    fn small() -> ViTConfig {
        ViTConfig {
            image_h: 8,
            image_w: 8,
            channels: 2,
            patch: 2,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            classes: 5,
            stages: vec![1, 2],
        }
    }

    fn batch(rng: &mut Rng, cfg: &ViTConfig, n: usize) -> Tensor4 {
        let len = n * cfg.channels * cfg.image_h * cfg.image_w;
        let data = (0..len).map(|_| rng.uniform(0.0, 1.0)).collect();
        Tensor4::from_vec(n, cfg.channels, cfg.image_h, cfg.image_w, data).unwrap()
    }

    #[test]
    fn desk_shapes() {
        let cfg = ViTConfig::desk();
        assert_eq!(cfg.tokens(), 65);
        let m = ViTModel::build(cfg.clone(), &mut Rng::new(0)).unwrap();
        assert_eq!(m.sparsifiable_layers().len(), 26);
        let x = Tensor4::zeros(2, 1, 32, 32);
        let (logits, stages) = m.forward(&x).unwrap();
        assert_eq!(logits.shape(), (2, 10));
        assert_eq!(stages.len(), 4);
        assert!(stages.iter().all(|s| s.shape() == (130, 64)));
    }

    #[test]
    fn config_rules() {
        let mut c = ViTConfig::desk();
        c.dim = 65;
        assert!(matches!(ViTModel::build(c, &mut Rng::new(0)), Err(Error::Config(_))));
        let mut c = ViTConfig::desk();
        c.patch = 3;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::desk();
        c.stages = vec![2, 1];
        assert!(c.validate().is_err());
        assert_eq!(default_stages(12), vec![3, 6, 9, 12]);
        assert_eq!(default_stages(2), vec![1, 2]);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = ViTModel::build(small(), &mut Rng::new(9)).unwrap();
        let b = ViTModel::build(small(), &mut Rng::new(9)).unwrap();
        let c = ViTModel::build(small(), &mut Rng::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn layer_list_excludes_norms() {
        let m = ViTModel::build(small(), &mut Rng::new(1)).unwrap();
        let names: Vec<&str> = m.sparsifiable_layers().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names.len(), 2 * 6 + 2);
        assert!(names.iter().all(|n| !n.contains("norm") && !n.contains("pos")));
        assert_eq!(names[0], "patch_embed");
        assert_eq!(*names.last().unwrap(), "head");
        assert_eq!(m.sparsifiable_layers(), m.sparsifiable_layers());
    }

    #[test]
    fn zero_input_zero_head_is_uniform() {
        let cfg = ViTConfig::desk();
        let mut m = ViTModel::build(cfg, &mut Rng::new(2)).unwrap();
        let hw = m.param_index("head.weight").unwrap();
        let p = &mut m.params_mut()[hw];
        *p = Matrix::zeros(p.rows(), p.cols());
        let (logits, _) = m.forward(&Tensor4::zeros(1, 1, 32, 32)).unwrap();
        let p = softmax(&logits);
        let entropy: f32 = -p.data().iter().map(|&v| v * v.ln()).sum::<f32>();
        assert!((entropy - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn batch_order_covariance() {
        let cfg = small();
        let mut rng = Rng::new(3);
        let m = ViTModel::build(cfg.clone(), &mut rng).unwrap();
        let x = batch(&mut rng, &cfg, 4);
        let (a, _) = m.forward(&x).unwrap();
        let perm = [2, 0, 3, 1];
        let (b, _) = m.forward(&x.select(&perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.row(i), a.row(p));
        }
    }

    #[test]
    fn masked_forward_matches_premultiplied() {
        let cfg = small();
        let mut rng = Rng::new(4);
        let mut m = ViTModel::build(cfg.clone(), &mut rng).unwrap();
        let x = batch(&mut rng, &cfg, 3);
        m.select_masks(SparsityPattern::TwoOfFour).unwrap();
        let (masked, _) = m.forward(&x).unwrap();
        let mut pre = m.clone();
        pre.prune_weights();
        pre.set_masks(vec![None; 14]).unwrap();
        let (direct, _) = pre.forward(&x).unwrap();
        assert_eq!(masked, direct);
    }

    #[test]
    fn all_ones_masks_are_bitwise_neutral() {
        let cfg = small();
        let mut rng = Rng::new(5);
        let mut m = ViTModel::build(cfg.clone(), &mut rng).unwrap();
        let x = batch(&mut rng, &cfg, 2);
        let (plain, _) = m.forward(&x).unwrap();
        let ones = m
            .sparsifiable_layers()
            .iter()
            .map(|l| Some(SparsityMask::all_ones(l.rows, l.cols, SparsityPattern::TwoOfFour)))
            .collect();
        // not pattern-legal, so set_masks would refuse it; the forward path
        // itself must still be neutral
        m.masks = ones;
        assert_eq!(m.forward(&x).unwrap().0, plain);
    }

    #[test]
    fn attention_rows_normalize() {
        let cfg = small();
        let mut rng = Rng::new(6);
        let m = ViTModel::build(cfg.clone(), &mut rng).unwrap();
        let x = batch(&mut rng, &cfg, 2);
        let mut tape = Tape::new();
        let tr = m.trace(&mut tape, &x, false).unwrap();
        for &a in &tr.attention {
            for p in tape.attention_probs(a).unwrap() {
                for r in 0..p.rows() {
                    let s: f32 = p.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn freeze_puts_weights_on_grid() {
        let cfg = small();
        let mut rng = Rng::new(7);
        let mut m = ViTModel::build(cfg.clone(), &mut rng).unwrap();
        m.select_masks(SparsityPattern::PairedFourOfEight).unwrap();
        m.prune_weights();
        let n = m.sparsifiable_layers().len();
        m.set_quant(QuantState {
            bits: BitWidth::Int4,
            act_scales: vec![0.1; n],
            weight_scales: None,
        })
        .unwrap();
        let x = batch(&mut rng, &cfg, 2);
        let before = m.forward(&x).unwrap().0;
        m.freeze_quant().unwrap();
        assert!(m.weights_on_grid());
        assert!(m.masks_hold());
        // freezing only moves weights to where fake-quant already put them
        let after = m.forward(&x).unwrap().0;
        let diff = before.sub(&after).unwrap().max_abs();
        assert!(diff < 1e-5, "{diff}");
        let packs = m.pack_layers(ElementFormat::Int4).unwrap();
        assert_eq!(packs.len(), n);
        assert!(m.pack_layers(ElementFormat::Int8).is_err());
    }

    #[test]
    fn deit_tiny_counts() {
        let dense = count_params_flops(&ViTConfig::deit_tiny(), Compression::DenseFp32).unwrap();
        assert_eq!(dense.params, 5_717_416);
        assert_eq!(dense.params_ratio(), Ratio::from(1));
        let int8 = count_params_flops(&ViTConfig::deit_tiny(), Compression::SparseInt8).unwrap();
        assert_eq!(int8.params_ratio(), Ratio::new(32, 5));
        assert_eq!(int8.flops_ratio(), Ratio::from(32));
        let int4 = count_params_flops(&ViTConfig::deit_tiny(), Compression::SparseInt4).unwrap();
        assert_eq!(int4.params_ratio(), Ratio::new(64, 5));
    }

    #[test]
    fn trainable_trace_has_param_gradients() {
        let cfg = small();
        let mut rng = Rng::new(8);
        let m = ViTModel::build(cfg.clone(), &mut rng).unwrap();
        let x = batch(&mut rng, &cfg, 2);
        let mut tape = Tape::new();
        let tr = m.trace(&mut tape, &x, true).unwrap();
        let l = tape.cross_entropy(tr.logits, vec![0, 3]).unwrap();
        let g = tape.backward(l).unwrap();
        for (i, &p) in tr.params.iter().enumerate() {
            let gm = g.get(p).unwrap_or_else(|| panic!("no gradient for {}", m.param_names()[i]));
            assert_eq!(gm.shape(), m.params()[i].shape());
        }
    }
}
