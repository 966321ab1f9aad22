//! The two compression workflows and their plumbing.
//!
//! 1. [`prune_workflow`]: select masks from the dense model, then fine-tune
//!    the masked student against the frozen dense teacher.
//! 2. [`qat_workflow`]: insert fake quantization into the sparse model and
//!    fine-tune it against the frozen sparse teacher, weighting each
//!    stage's feature loss by how hard that stage was to recover during
//!    pruning.
//!
//! The teacher never changes within a workflow and the data is not
//! augmented, so teacher outputs are computed once per workflow.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Optimizer, Sgd, Tape};
use crate::data::Dataset;
use crate::distill::{
    argmax_rows, distill_on_tape, qat_weight_factors, DistillReport, FactorFn, LabelMode, LossWeights,
    Objective, QatWeightFactors, StageSelect, TeacherBatch, DEFAULT_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::format::{storage_saving, ElementFormat};
use crate::numerics::{Matrix, Rng, Tensor4};
use crate::quant::{BitWidth, MIN_SCALE};
use crate::sparsity::SparsityPattern;
use crate::vit::{count_params_flops, ratio_f64, Compression, QuantState, ViTConfig, ViTModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Epochs {
    pub dense: usize,
    pub prune: usize,
    pub qat: usize,
}

impl Default for Epochs {
    fn default() -> Self {
        Self {
            dense: 30,
            prune: 20,
            qat: 10,
        }
    }
}

/// Base learning rate of each workflow. Each decays 10x once 75% of its
/// epochs have run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub dense: f32,
    pub prune: f32,
    pub qat: f32,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            dense: 2e-3,
            prune: 2e-4,
            qat: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Momentum SGD with [`PipelineConfig::momentum`].
    Sgd,
    #[default]
    Adam,
}

impl OptimizerKind {
    fn build(self, lr: f32, momentum: f32) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd::new(lr, momentum)),
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub weights: LossWeights,
    pub temperature: f32,
    pub fmt: BitWidth,
    pub epochs: Epochs,
    pub lr: LearningRates,
    pub optimizer: OptimizerKind,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: LabelMode,
    pub stages: StageSelect,
    pub factor: FactorFn,
    /// Batches used for the initial activation-range pass of QAT.
    pub calib_batches: usize,
    /// Evaluate after every epoch rather than only after the last one.
    pub eval_each_epoch: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            temperature: DEFAULT_TEMPERATURE,
            fmt: BitWidth::Int8,
            epochs: Epochs::default(),
            lr: LearningRates::default(),
            optimizer: OptimizerKind::default(),
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            mode: LabelMode::default(),
            stages: StageSelect::default(),
            factor: FactorFn::default(),
            calib_batches: 8,
            eval_each_epoch: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        for (what, lr) in [("dense", self.lr.dense), ("prune", self.lr.prune), ("qat", self.lr.qat)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config(format!("{what} learning rate {lr} must be >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.calib_batches == 0 {
            return Err(Error::config("need at least one calibration batch"));
        }
        Ok(())
    }

    /// Sparsity pattern demanded by the target format.
    pub fn pattern(&self) -> SparsityPattern {
        ElementFormat::from_bit_width(self.fmt).pattern()
    }
}

/// Constant rate with a single 10x decay once 75% of the epochs have run.
pub fn lr_at(base: f32, epoch: usize, epochs: usize) -> f32 {
    if epoch as f64 >= 0.75 * epochs as f64 {
        base / 10.0
    } else {
        base
    }
}

/// Top-k accuracy in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Accuracy of `logits` against `labels`. A sample counts as a top-k hit
/// when fewer than k classes outrank the true one (ties broken toward the
/// lower index, as in argmax).
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<Accuracy> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!("{} rows for {} labels", logits.rows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::shape("no samples to evaluate"));
    }
    let (mut h1, mut h5) = (0usize, 0usize);
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let t = *row
            .get(y)
            .ok_or_else(|| Error::shape(format!("label {y} outside {} classes", row.len())))?;
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v > t || (v == t && i < y))
            .count();
        h1 += (rank < 1) as usize;
        h5 += (rank < 5) as usize;
    }
    let n = labels.len() as f64;
    Ok(Accuracy {
        top1: 100.0 * h1 as f64 / n,
        top5: 100.0 * h5 as f64 / n,
    })
}

pub fn evaluate(model: &ViTModel, data: &Dataset, batch: usize) -> Result<Accuracy> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::config("evaluation split has no labels"))?;
    let logits = model.predict(data.images(), batch)?;
    accuracy(&logits, labels)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub workflow: String,
    pub epoch: usize,
    pub l_hard: f32,
    pub l_soft: f32,
    pub l_feature: f32,
    pub combined: f32,
    pub top1: Option<f64>,
    pub gate_hits: f32,
}

/// Line-delimited JSON metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: MetricsRecord) {
        log::info!(
            "{} epoch {}: combined {:.4} hard {:.4} soft {:.4} feature {:.4} gate {:.3} top1 {}",
            r.workflow,
            r.epoch,
            r.combined,
            r.l_hard,
            r.l_soft,
            r.l_feature,
            r.gate_hits,
            r.top1.map_or("-".to_string(), |v| format!("{v:.2}"))
        );
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(line)
                .map_err(|e| Error::format(i, format!("metrics line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(Self { records })
    }
}

/// Frozen-teacher outputs over a whole training split.
struct TeacherCache {
    logits: Matrix,
    /// Indexed like the model's stage list; only selected stages are kept.
    stages: Vec<Option<Matrix>>,
    tokens: usize,
}

impl TeacherCache {
    fn build(teacher: &ViTModel, x: &Tensor4, keep: &[usize], batch: usize) -> Result<Self> {
        let cfg = teacher.config();
        let tokens = cfg.tokens();
        let n_stages = cfg.stages.len();
        let mut logits = Vec::with_capacity(x.n * cfg.classes);
        let mut stages: Vec<Option<Vec<f32>>> =
            (0..n_stages).map(|s| keep.contains(&s).then(Vec::new)).collect();
        let mut start = 0;
        while start < x.n {
            let end = (start + batch).min(x.n);
            let idx: Vec<usize> = (start..end).collect();
            let (l, st) = teacher.forward(&x.select(&idx))?;
            logits.extend_from_slice(l.data());
            for (dst, src) in stages.iter_mut().zip(&st) {
                if let Some(d) = dst {
                    d.extend_from_slice(src.data());
                }
            }
            start = end;
        }
        Ok(Self {
            logits: Matrix::from_vec(x.n, cfg.classes, logits)?,
            stages: stages
                .into_iter()
                .map(|s| s.map(|d| Matrix::from_vec(x.n * tokens, cfg.dim, d)).transpose())
                .collect::<Result<_>>()?,
            tokens,
        })
    }

    fn gather(&self, idx: &[usize]) -> (Matrix, Vec<Matrix>) {
        let classes = self.logits.cols();
        let mut l = Vec::with_capacity(idx.len() * classes);
        for &i in idx {
            l.extend_from_slice(self.logits.row(i));
        }
        let stages = self
            .stages
            .iter()
            .map(|s| match s {
                Some(m) => {
                    let width = m.cols() * self.tokens;
                    let mut d = Vec::with_capacity(idx.len() * width);
                    for &i in idx {
                        d.extend_from_slice(&m.data()[i * width..(i + 1) * width]);
                    }
                    Matrix::from_vec(idx.len() * self.tokens, m.cols(), d).expect("finite teacher")
                }
                None => Matrix::zeros(0, 0),
            })
            .collect();
        (Matrix::from_vec(idx.len(), classes, l).expect("finite teacher"), stages)
    }
}

/// Running means of batch reports, weighted by batch size.
#[derive(Default)]
struct ReportMean {
    sum: DistillReport,
    stage_n: std::collections::BTreeMap<usize, f64>,
    stage_sum: std::collections::BTreeMap<usize, f64>,
    n: f64,
}

impl ReportMean {
    fn add(&mut self, r: &DistillReport, batch: usize) {
        let w = batch as f32;
        self.sum.l_hard += w * r.l_hard;
        self.sum.l_soft += w * r.l_soft;
        self.sum.l_feature += w * r.l_feature;
        self.sum.combined += w * r.combined;
        self.sum.gate_hits += w * r.gate_hits;
        for (&s, &v) in &r.per_stage {
            *self.stage_sum.entry(s).or_default() += batch as f64 * v as f64;
            *self.stage_n.entry(s).or_default() += batch as f64;
        }
        self.n += batch as f64;
    }

    fn mean(&self) -> DistillReport {
        let n = self.n.max(1.0) as f32;
        DistillReport {
            l_hard: self.sum.l_hard / n,
            l_soft: self.sum.l_soft / n,
            l_feature: self.sum.l_feature / n,
            combined: self.sum.combined / n,
            gate_hits: self.sum.gate_hits / n,
            per_stage: self
                .stage_sum
                .iter()
                .map(|(&s, &v)| (s, (v / self.stage_n[&s]) as f32))
                .collect(),
        }
    }
}

struct Loop<'a> {
    workflow: &'static str,
    epochs: usize,
    lr: f32,
    optimizer: OptimizerKind,
    momentum: f32,
    batch: usize,
    rng: Rng,
    test: Option<&'a Dataset>,
    eval_each_epoch: bool,
}

/// Shared training loop. `step` records the objective for one batch of
/// sample indices; `after` sees the batch's activation ranges once the
/// optimizer has stepped. Returns the last epoch's mean report.
fn train_loop(
    model: &mut ViTModel,
    x: &Tensor4,
    mut lp: Loop<'_>,
    log: &mut MetricsLog,
    mut step: impl FnMut(&mut Tape, &crate::vit::Trace, &[usize]) -> Result<(crate::autodiff::Var, DistillReport)>,
    mut after: impl FnMut(&mut ViTModel, &[f32]),
) -> Result<DistillReport> {
    let mut opt = lp.optimizer.build(lp.lr, lp.momentum);
    let mut order: Vec<usize> = (0..x.n).collect();
    let mut last = DistillReport::default();
    let names: Vec<String> = model.param_names().to_vec();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    for epoch in 0..lp.epochs {
        opt.set_lr(lr_at(lp.lr, epoch, lp.epochs));
        lp.rng.shuffle(&mut order);
        let mut mean = ReportMean::default();
        for (bi, idx) in order.chunks(lp.batch).enumerate() {
            let xb = x.select(idx);
            let mut tape = Tape::new();
            let tr = model.trace(&mut tape, &xb, true)?;
            let (loss, report) = step(&mut tape, &tr, idx)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "{} epoch {epoch} batch {bi}: loss {value} (hard {}, soft {}, feature {})",
                    lp.workflow, report.l_hard, report.l_soft, report.l_feature
                )));
            }
            let mut grads = tape.backward(loss)?;
            let g: Vec<Matrix> = tr
                .params
                .iter()
                .map(|&p| grads.take(p).ok_or_else(|| Error::Graph("parameter without gradient".into())))
                .collect::<Result<_>>()?;
            {
                let masks = model.param_masks().into_iter().map(|m| m.cloned()).collect::<Vec<_>>();
                let mask_refs: Vec<_> = masks.iter().map(Option::as_ref).collect();
                let mut params: Vec<&mut Matrix> = model.params_mut().iter_mut().collect();
                opt.step(&mut params, &g, &mask_refs, &names)
                    .map_err(|e| Error::Training(format!("{} epoch {epoch} batch {bi}: {e}", lp.workflow)))?;
            }
            after(model, &tr.act_amax);
            mean.add(&report, idx.len());
        }
        last = mean.mean();
        let top1 = match lp.test {
            Some(t) if lp.eval_each_epoch || epoch + 1 == lp.epochs => Some(evaluate(model, t, 256)?.top1),
            _ => None,
        };
        log.push(MetricsRecord {
            workflow: lp.workflow.to_string(),
            epoch,
            l_hard: last.l_hard,
            l_soft: last.l_soft,
            l_feature: last.l_feature,
            combined: last.combined,
            top1,
            gate_hits: last.gate_hits,
        });
    }
    Ok(last)
}

fn stream(seed: u64, workflow: u64) -> Rng {
    Rng::new(seed).fork(workflow)
}

/// Trains a freshly built model with cross-entropy on ground-truth labels.
pub fn train_dense(
    config: ViTConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &PipelineConfig,
    log: &mut MetricsLog,
) -> Result<ViTModel> {
    cfg.validate()?;
    let mut model = ViTModel::build(config, &mut stream(cfg.seed, 0))?;
    let labels = train
        .labels()
        .ok_or_else(|| Error::config("dense training needs labels"))?
        .to_vec();
    let lp = Loop {
        workflow: "dense",
        epochs: cfg.epochs.dense,
        lr: cfg.lr.dense,
        optimizer: cfg.optimizer,
        momentum: cfg.momentum,
        batch: cfg.batch_size,
        rng: stream(cfg.seed, 1),
        test,
        eval_each_epoch: cfg.eval_each_epoch,
    };
    train_loop(
        &mut model,
        train.images(),
        lp,
        log,
        |tape, tr, idx| {
            let y = idx.iter().map(|&i| labels[i]).collect();
            let l = tape.cross_entropy(tr.logits, y)?;
            let v = tape.scalar(l);
            Ok((
                l,
                DistillReport {
                    l_hard: v,
                    combined: v,
                    ..Default::default()
                },
            ))
        },
        |_, _| {},
    )?;
    Ok(model)
}

/// Result of [`prune_workflow`].
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub model: ViTModel,
    /// Final-epoch mean feature loss of each selected stage, in stage
    /// order.
    pub stage_losses: Vec<f32>,
    pub report: DistillReport,
}

fn stage_plan(model: &ViTModel, select: StageSelect, factors: Option<&QatWeightFactors>) -> Vec<(usize, f32)> {
    let sel = select.indices(model.config().stages.len());
    let n = sel.len() as f32;
    sel.iter()
        .enumerate()
        .map(|(i, &s)| (s, factors.map_or(1.0 / n, |f| f.factors[i] as f32)))
        .collect()
}

fn hard_targets_for(
    cfg: &PipelineConfig,
    train: &Dataset,
    teacher_logits: &Matrix,
) -> Result<Vec<usize>> {
    match cfg.mode {
        LabelMode::Unsupervised => Ok(argmax_rows(teacher_logits)),
        LabelMode::Supervised => Ok(train
            .labels()
            .ok_or_else(|| Error::config("supervised mode needs training labels"))?
            .to_vec()),
    }
}

/// Workflow 1: 2:4 (or paired 4:8 for INT4) masks from the dense weights,
/// then fine-tuning against the dense teacher. Masks never change after
/// selection.
pub fn prune_workflow(
    dense: &ViTModel,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &PipelineConfig,
    log: &mut MetricsLog,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    let mut student = dense.clone();
    student.clear_quant();
    student.select_masks(cfg.pattern())?;
    student.prune_weights();
    let plan = stage_plan(&student, cfg.stages, None);
    let keep: Vec<usize> = plan.iter().map(|p| p.0).collect();
    let cache = TeacherCache::build(dense, train.images(), &keep, 256)?;
    let targets = hard_targets_for(cfg, train, &cache.logits)?;
    let obj = Objective {
        weights: cfg.weights,
        temperature: cfg.temperature,
        stages: &plan,
    };
    let lp = Loop {
        workflow: "prune",
        epochs: cfg.epochs.prune,
        lr: cfg.lr.prune,
        optimizer: cfg.optimizer,
        momentum: cfg.momentum,
        batch: cfg.batch_size,
        rng: stream(cfg.seed, 2),
        test,
        eval_each_epoch: cfg.eval_each_epoch,
    };
    let report = train_loop(
        &mut student,
        train.images(),
        lp,
        log,
        |tape, tr, idx| {
            let (tl, ts) = cache.gather(idx);
            let y = idx.iter().map(|&i| targets[i]).collect();
            let tb = TeacherBatch {
                logits: &tl,
                stages: &ts,
            };
            distill_on_tape(tape, tr.logits, &tr.stages, &tb, y, &obj)
        },
        |_, _| {},
    )?;
    debug_assert!(student.masks_hold());
    let stage_losses = keep
        .iter()
        .map(|s| report.per_stage.get(s).copied().unwrap_or(0.0))
        .collect();
    Ok(PruneOutcome {
        model: student,
        stage_losses,
        report,
    })
}

/// Result of [`qat_workflow`].
#[derive(Clone, Debug)]
pub struct QatOutcome {
    pub model: ViTModel,
    pub factors: QatWeightFactors,
    pub report: DistillReport,
}

/// Max |x| of every layer input over the first `batches` batches, in
/// natural sample order.
fn activation_ranges(model: &ViTModel, x: &Tensor4, batch: usize, batches: usize) -> Result<Vec<f32>> {
    let mut amax = vec![0.0f32; model.sparsifiable_layers().len()];
    for b in 0..batches {
        let start = b * batch;
        if start >= x.n {
            break;
        }
        let idx: Vec<usize> = (start..(start + batch).min(x.n)).collect();
        let mut tape = Tape::new();
        let tr = model.trace(&mut tape, &x.select(&idx), false)?;
        for (a, &v) in amax.iter_mut().zip(&tr.act_amax) {
            *a = a.max(v);
        }
    }
    Ok(amax)
}

/// Workflow 2: quantization-aware fine-tuning of the sparse model with the
/// sparse model itself as teacher. `stage_losses` are the pruning-time
/// feature losses from [`prune_workflow`].
pub fn qat_workflow(
    sparse: &ViTModel,
    stage_losses: &[f32],
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &PipelineConfig,
    log: &mut MetricsLog,
) -> Result<QatOutcome> {
    cfg.validate()?;
    let pattern = cfg.pattern();
    if sparse.masks().iter().any(|m| m.as_ref().map(|m| m.pattern()) != Some(pattern)) {
        return Err(Error::config(format!(
            "{}-bit QAT needs every layer masked with the {pattern:?} pattern; prune with the same format first",
            cfg.fmt.bits()
        )));
    }
    let factors = qat_weight_factors(stage_losses, cfg.factor)?;
    let plan = stage_plan(sparse, cfg.stages, Some(&factors));
    if plan.len() != stage_losses.len() {
        return Err(Error::config(format!(
            "{} stage losses for {} selected stages",
            stage_losses.len(),
            plan.len()
        )));
    }
    let keep: Vec<usize> = plan.iter().map(|p| p.0).collect();
    let mut teacher = sparse.clone();
    teacher.clear_quant();
    let cache = TeacherCache::build(&teacher, train.images(), &keep, 256)?;
    let targets = hard_targets_for(cfg, train, &cache.logits)?;

    let mut student = teacher.clone();
    let bits = cfg.fmt;
    let qmax = bits.qmax() as f32;
    let ranges = activation_ranges(&student, train.images(), cfg.batch_size, cfg.calib_batches)?;
    student.set_quant(QuantState {
        bits,
        act_scales: ranges.iter().map(|&a| (a / qmax).max(MIN_SCALE)).collect(),
        weight_scales: None,
    })?;

    let obj = Objective {
        weights: cfg.weights,
        temperature: cfg.temperature,
        stages: &plan,
    };
    let lp = Loop {
        workflow: "qat",
        epochs: cfg.epochs.qat,
        lr: cfg.lr.qat,
        optimizer: cfg.optimizer,
        momentum: cfg.momentum,
        batch: cfg.batch_size,
        rng: stream(cfg.seed, 3),
        test: None,
        eval_each_epoch: false,
    };
    let report = train_loop(
        &mut student,
        train.images(),
        lp,
        log,
        |tape, tr, idx| {
            let (tl, ts) = cache.gather(idx);
            let y = idx.iter().map(|&i| targets[i]).collect();
            let tb = TeacherBatch {
                logits: &tl,
                stages: &ts,
            };
            distill_on_tape(tape, tr.logits, &tr.stages, &tb, y, &obj)
        },
        |m, amax| {
            if let Some(q) = m.quant_mut() {
                for (s, &a) in q.act_scales.iter_mut().zip(amax) {
                    *s = crate::quant::ema_scale(*s, a, bits);
                }
            }
        },
    )?;
    student.freeze_quant()?;
    // the log line for the final epoch reports the frozen model
    if let (Some(t), Some(last)) = (test, log.records.last_mut()) {
        last.top1 = Some(evaluate(&student, t, 256)?.top1);
    }
    Ok(QatOutcome {
        model: student,
        factors,
        report,
    })
}

/// What a report covers: the model shape, measured accuracies where
/// available, and the quantized models whose packed layers should be
/// itemized.
#[derive(Clone, Debug)]
pub struct CompressionArtifacts {
    pub config: ViTConfig,
    pub dense_top1: Option<f64>,
    /// Accuracy of the FP32 2:4 model, when one was trained.
    pub sparse_top1: Option<f64>,
    pub quantized: Vec<QuantArtifact>,
}

#[derive(Clone, Debug)]
pub struct QuantArtifact {
    pub bits: BitWidth,
    pub top1: Option<f64>,
    pub model: Option<ViTModel>,
}

impl CompressionArtifacts {
    /// Cost rows only: dense, sparse INT8 and sparse INT4 without
    /// accuracies.
    pub fn cost_only(config: ViTConfig) -> Self {
        Self {
            config,
            dense_top1: None,
            sparse_top1: None,
            quantized: [BitWidth::Int8, BitWidth::Int4]
                .into_iter()
                .map(|bits| QuantArtifact {
                    bits,
                    top1: None,
                    model: None,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub compression: Compression,
    pub params_m: f64,
    pub params_equiv_m: f64,
    pub params_ratio: f64,
    pub flops_g: f64,
    pub effective_flops_g: f64,
    pub flops_ratio: f64,
    pub top1: Option<f64>,
    pub top1_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSaving {
    pub model: String,
    pub layer: String,
    pub format: String,
    pub dense_bytes: u64,
    pub packed_bytes: u64,
    pub saving_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompressionReport {
    pub rows: Vec<ReportRow>,
    pub layers: Vec<LayerSaving>,
}

fn compression_for(bits: BitWidth) -> Compression {
    match bits {
        BitWidth::Int8 => Compression::SparseInt8,
        BitWidth::Int4 => Compression::SparseInt4,
    }
}

/// Table-style summary: parameter and FLOP equivalents, ratios against the
/// dense model, accuracy deltas against the dense model, and per-layer
/// storage savings of each quantized model's packed weights.
pub fn compression_report(a: &CompressionArtifacts) -> Result<CompressionReport> {
    let mut rows = Vec::new();
    let mut layers = Vec::new();
    let mut entry = |name: String, c: Compression, top1: Option<f64>| -> Result<()> {
        let cost = count_params_flops(&a.config, c)?;
        rows.push(ReportRow {
            model: name,
            compression: c,
            params_m: cost.params_m(),
            params_equiv_m: cost.params_equiv_m(),
            params_ratio: ratio_f64(cost.params_ratio()),
            flops_g: cost.flops_g(),
            effective_flops_g: cost.effective_flops_g(),
            flops_ratio: ratio_f64(cost.flops_ratio()),
            top1,
            top1_delta: top1.zip(a.dense_top1).map(|(t, d)| t - d),
        });
        Ok(())
    };
    entry("dense".into(), Compression::DenseFp32, a.dense_top1)?;
    if a.sparse_top1.is_some() {
        // FP32 values are stored densely, so the cost matches the dense row
        entry("sparse-fp32".into(), Compression::DenseFp32, a.sparse_top1)?;
    }
    for q in &a.quantized {
        let fmt = ElementFormat::from_bit_width(q.bits);
        let name = format!("sparse-{}", fmt.to_string().to_lowercase());
        entry(name.clone(), compression_for(q.bits), q.top1)?;
        let Some(m) = &q.model else { continue };
        if m.config() != &a.config {
            return Err(Error::config(format!("{name} model does not match the report configuration")));
        }
        for (layer, p) in m.pack_layers(fmt)? {
            let (r, cols) = (p.rows() as u64, p.cols() as u64);
            let dense_bits = crate::format::storage_bits(r, cols, fmt, false);
            let packed_bits = crate::format::storage_bits(r, cols, fmt, true);
            let s: Ratio<u64> = storage_saving(r, cols, fmt);
            layers.push(LayerSaving {
                model: name.clone(),
                layer,
                format: fmt.to_string(),
                dense_bytes: dense_bits.div_ceil(8),
                packed_bytes: packed_bits.div_ceil(8),
                saving_percent: 100.0 * ratio_f64(s),
            });
        }
    }
    Ok(CompressionReport { rows, layers })
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("-".into(), |v| format!("{v:.prec$}"))
}

impl CompressionReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "model\tparams_m\tparams_equiv_m\tparams_ratio\tflops_g\teffective_flops_g\tflops_ratio\ttop1\ttop1_delta\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\t{:.6}\t{:.4}\t{}\t{}",
                r.model,
                r.params_m,
                r.params_equiv_m,
                r.params_ratio,
                r.flops_g,
                r.effective_flops_g,
                r.flops_ratio,
                opt(r.top1, 2),
                opt(r.top1_delta, 2)
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>10} {:>13} {:>12} {:>20} {:>8} {:>8}",
            "model", "params(M)", "params-eq(M)", "FLOPs(G)", "eff. FLOPs(G, mod.)", "top-1", "delta"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>10.4} {:>6.4} ({:>4.1}x) {:>12.4} {:>11.5} ({:>4.0}x) {:>8} {:>8}",
                r.model,
                r.params_m,
                r.params_equiv_m,
                r.params_ratio,
                r.flops_g,
                r.effective_flops_g,
                r.flops_ratio,
                opt(r.top1, 2),
                opt(r.top1_delta, 2)
            );
        }
        if !self.layers.is_empty() {
            let _ = writeln!(s, "\nper-layer storage");
            for l in &self.layers {
                let _ = writeln!(
                    s,
                    "{:<12} {:<22} {:>5} {:>9} -> {:>9} bytes  saving {:.2}%",
                    l.model, l.layer, l.format, l.dense_bytes, l.packed_bytes, l.saving_percent
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_once() {
        let lrs: Vec<f32> = (0..8).map(|e| lr_at(1.0, e, 8)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1]);
        assert_eq!(lr_at(1.0, 0, 1), 1.0);
    }

    #[test]
    fn accuracy_cases() {
        let eye = Matrix::identity(10);
        let labels: Vec<usize> = (0..10).collect();
        let a = accuracy(&eye, &labels).unwrap();
        assert_eq!((a.top1, a.top5), (100.0, 100.0));
        let shifted: Vec<usize> = (0..10).map(|i| (i + 1) % 10).collect();
        let b = accuracy(&eye, &shifted).unwrap();
        assert_eq!(b.top1, 0.0);
        // all-zero rows: ties resolve toward lower indices
        assert!(b.top5 >= b.top1);
    }

    #[test]
    fn random_predictor_near_chance() {
        let mut rng = Rng::new(77);
        let n = 1000;
        let data = (0..n * 10).map(|_| rng.uniform(0.0, 1.0)).collect();
        let logits = Matrix::from_vec(n, 10, data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
        let a = accuracy(&logits, &labels).unwrap();
        // binomial(1000, 0.1): sd ≈ 0.95 points, so ±3 points is > 3 sd
        assert!((a.top1 - 10.0).abs() <= 3.0, "{}", a.top1);
        assert!(a.top5 >= a.top1);
    }

    #[test]
    fn metrics_round_trip() {
        let mut log = MetricsLog::default();
        log.push(MetricsRecord {
            workflow: "prune".into(),
            epoch: 3,
            l_hard: 0.1,
            l_soft: 0.2,
            l_feature: 0.3,
            combined: 3.6,
            top1: Some(97.5),
            gate_hits: 0.9,
        });
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(MetricsLog::from_jsonl(&text).unwrap(), log);
    }

    #[test]
    fn cost_report_ratios() {
        let r = compression_report(&CompressionArtifacts::cost_only(ViTConfig::desk())).unwrap();
        let names: Vec<&str> = r.rows.iter().map(|x| x.model.as_str()).collect();
        assert_eq!(names, ["dense", "sparse-int8", "sparse-int4"]);
        assert_eq!(r.rows[0].params_ratio, 1.0);
        assert_eq!(r.rows[1].params_ratio, 6.4);
        assert_eq!(r.rows[2].params_ratio, 12.8);
        assert!(r.layers.is_empty());
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.lines().nth(1).unwrap().starts_with("dense\t"));
    }

    #[test]
    fn config_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.weights, LossWeights { alpha: 1.0, beta: 10.0, gamma: 5.0 });
        assert_eq!(c.mode, LabelMode::Unsupervised);
        let four = PipelineConfig {
            fmt: BitWidth::Int4,
            ..c
        };
        assert_eq!(four.pattern(), SparsityPattern::PairedFourOfEight);
        let json = serde_json::to_string(&four).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), four);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
