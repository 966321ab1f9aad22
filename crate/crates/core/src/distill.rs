//! Distillation losses, label-agreement gating and per-stage QAT weight
//! factors.
//!
//! The pruning objective is `α·L_hard + β·L_soft + γ·L_feature` with the
//! feature term averaged over the selected stages. The calibration
//! objective has the same shape but weights each stage's feature loss by a
//! factor that shrinks as that stage's pruning-time feature loss grows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_TEMPERATURE: f32 = 2.0;

/// `α`, `β`, `γ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            gamma: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("loss weights {w:?} must be finite and non-negative")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }

    pub fn combine(&self, hard: f32, soft: f32, feature: f32) -> f32 {
        self.alpha * hard + self.beta * soft + self.gamma * feature
    }
}

/// Where hard labels come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Ground-truth labels of the training split.
    Supervised,
    /// Teacher argmax; labels are never read.
    #[default]
    Unsupervised,
}

/// Which stage taps enter the feature loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageSelect {
    /// The last two taps.
    #[default]
    Later,
    All,
}

impl StageSelect {
    /// Positions into the model's stage list.
    pub fn indices(self, stages: usize) -> Vec<usize> {
        match self {
            StageSelect::All => (0..stages).collect(),
            StageSelect::Later => (stages.saturating_sub(2)..stages).collect(),
        }
    }
}

/// How pruning-time stage losses turn into calibration weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorFn {
    /// `softmax(−L/τ)` with `τ` the mean loss.
    #[default]
    Softmax,
    /// `1/L`, normalized.
    Inverse,
    /// Equal weights; disables the factor.
    Uniform,
}

/// Per-stage factors in `(0, 1]` summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QatWeightFactors {
    pub factors: Vec<f64>,
}

const TAU_FLOOR: f64 = 1e-8;

pub fn qat_weight_factors(losses: &[f32], f: FactorFn) -> Result<QatWeightFactors> {
    if losses.is_empty() {
        return Err(Error::config("no stage losses to weight"));
    }
    if losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::config(format!("stage losses {losses:?} must be finite and >= 0")));
    }
    let l: Vec<f64> = losses.iter().map(|&v| v as f64).collect();
    let raw: Vec<f64> = match f {
        FactorFn::Uniform => vec![1.0; l.len()],
        FactorFn::Softmax => {
            let tau = (l.iter().sum::<f64>() / l.len() as f64).max(TAU_FLOOR);
            let min = l.iter().cloned().fold(f64::INFINITY, f64::min);
            // shifting by the minimum leaves the softmax unchanged
            l.iter().map(|&v| (-(v - min) / tau).exp()).collect()
        }
        FactorFn::Inverse => l.iter().map(|&v| 1.0 / v.max(TAU_FLOOR)).collect(),
    };
    let sum: f64 = raw.iter().sum();
    Ok(QatWeightFactors {
        factors: raw.into_iter().map(|v| v / sum).collect(),
    })
}

/// Hard targets for a batch.
pub fn hard_targets(teacher_logits: &Matrix, labels: Option<&[usize]>, mode: LabelMode) -> Result<Vec<usize>> {
    match mode {
        LabelMode::Unsupervised => Ok(argmax_rows(teacher_logits)),
        LabelMode::Supervised => {
            let labels = labels.ok_or_else(|| Error::config("supervised mode needs labels"))?;
            if labels.len() != teacher_logits.rows() {
                return Err(Error::shape(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    teacher_logits.rows()
                )));
            }
            Ok(labels.to_vec())
        }
    }
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Cross-entropy of the student against hard targets taken per `mode`.
pub fn hard_label_loss(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    labels: Option<&[usize]>,
    mode: LabelMode,
) -> Result<f32> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::shape(format!(
            "student logits {:?} vs teacher {:?}",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    let targets = hard_targets(teacher_logits, labels, mode)?;
    let mut t = Tape::new();
    let s = t.constant(student_logits.clone());
    let l = t.cross_entropy(s, targets)?;
    Ok(t.scalar(l))
}

/// `T²·KL(softmax(teacher/T) ‖ softmax(student/T))`, batch mean.
pub fn soft_logits_loss(student_logits: &Matrix, teacher_logits: &Matrix, temperature: f32) -> Result<f32> {
    let mut t = Tape::new();
    let s = t.constant(student_logits.clone());
    let l = t.kl_div(s, teacher_logits, temperature)?;
    Ok(t.scalar(l))
}

/// Whether teacher and student agree on the predicted class, per sample.
pub fn label_gate(student_logits: &Matrix, teacher_logits: &Matrix) -> Vec<bool> {
    argmax_rows(student_logits)
        .into_iter()
        .zip(argmax_rows(teacher_logits))
        .map(|(a, b)| a == b)
        .collect()
}

fn row_weights(gate: &[bool], rows: usize) -> Result<Vec<f32>> {
    if gate.is_empty() || !rows.is_multiple_of(gate.len()) {
        return Err(Error::shape(format!("{} gate entries for {rows} feature rows", gate.len())));
    }
    let per = rows / gate.len();
    Ok(gate
        .iter()
        .flat_map(|&g| std::iter::repeat_n(if g { 1.0 } else { 0.0 }, per))
        .collect())
}

/// Per-element MSE on gated samples for each selected stage, and their
/// mean. Stage features are `[batch·tokens, dim]`. With no gated sample
/// the loss is 0 and the map is empty.
pub fn feature_loss(
    student_stages: &[Matrix],
    teacher_stages: &[Matrix],
    gate: &[bool],
    stage_select: &[usize],
) -> Result<(f32, BTreeMap<usize, f32>)> {
    if student_stages.len() != teacher_stages.len() {
        return Err(Error::shape("student and teacher stage counts differ"));
    }
    let mut map = BTreeMap::new();
    if !gate.iter().any(|&g| g) {
        return Ok((0.0, map));
    }
    let mut t = Tape::new();
    for &s in stage_select {
        let (a, b) = student_stages
            .get(s)
            .zip(teacher_stages.get(s))
            .ok_or_else(|| Error::shape(format!("stage {s} not available")))?;
        let w = row_weights(gate, a.rows())?;
        let v = t.constant(a.clone());
        let l = t.mse(v, b, Some(&w))?;
        map.insert(s, t.scalar(l));
    }
    let total = if map.is_empty() {
        0.0
    } else {
        map.values().sum::<f32>() / map.len() as f32
    };
    Ok((total, map))
}

/// Pruning objective: the feature term averages the stages equally.
pub fn combine_prune_loss(report: &DistillReport, weights: &LossWeights) -> f32 {
    weights.combine(report.l_hard, report.l_soft, report.l_feature)
}

/// QAT objective; `weighted_feature` is `Σ_s w_s·L_s`.
pub fn combine_calibrate_loss(hard: f32, soft: f32, weighted_feature: f32, weights: &LossWeights) -> f32 {
    weights.combine(hard, soft, weighted_feature)
}

/// Loss values of one batch (or the mean over an epoch).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub l_hard: f32,
    pub l_soft: f32,
    /// Stage-weighted feature loss.
    pub l_feature: f32,
    /// Keyed by position in the model's stage list.
    pub per_stage: BTreeMap<usize, f32>,
    pub combined: f32,
    pub gate_hits: f32,
}

/// Teacher outputs for one batch.
pub struct TeacherBatch<'a> {
    pub logits: &'a Matrix,
    /// Indexed like the model's stage list.
    pub stages: &'a [Matrix],
}

/// Everything the objective needs besides the two models' outputs.
pub struct Objective<'a> {
    pub weights: LossWeights,
    pub temperature: f32,
    /// Selected stages and their weights (`1/n` each while pruning).
    pub stages: &'a [(usize, f32)],
}

/// Records the distillation objective for one batch on `tape`.
///
/// All three losses are always measured and reported; only terms with a
/// positive weight enter the returned objective. `l_feature` in the report
/// is the stage-weighted feature loss whether or not `γ` is zero, so
/// `combined` shows its actual contribution.
pub fn distill_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    student_stages: &[Var],
    teacher: &TeacherBatch<'_>,
    targets: Vec<usize>,
    obj: &Objective<'_>,
) -> Result<(Var, DistillReport)> {
    let w = obj.weights;
    let gate = label_gate(tape.value(student_logits), teacher.logits);
    let hits = gate.iter().filter(|&&g| g).count();
    let mut report = DistillReport {
        gate_hits: hits as f32 / gate.len().max(1) as f32,
        ..Default::default()
    };
    let mut terms: Vec<Var> = Vec::new();

    let hard = tape.cross_entropy(student_logits, targets)?;
    report.l_hard = tape.scalar(hard);
    if w.alpha > 0.0 {
        terms.push(tape.scale(hard, w.alpha));
    }
    let soft = tape.kl_div(student_logits, teacher.logits, obj.temperature)?;
    report.l_soft = tape.scalar(soft);
    if w.beta > 0.0 {
        terms.push(tape.scale(soft, w.beta));
    }
    if hits > 0 {
        let mut feat: Option<Var> = None;
        for &(s, c) in obj.stages {
            let sv = *student_stages
                .get(s)
                .ok_or_else(|| Error::shape(format!("student stage {s} missing")))?;
            let tv = teacher
                .stages
                .get(s)
                .ok_or_else(|| Error::shape(format!("teacher stage {s} missing")))?;
            let rw = row_weights(&gate, tv.rows())?;
            let l = tape.mse(sv, tv, Some(&rw))?;
            report.per_stage.insert(s, tape.scalar(l));
            let l = tape.scale(l, c);
            feat = Some(match feat {
                Some(f) => tape.add(f, l)?,
                None => l,
            });
        }
        if let Some(f) = feat {
            report.l_feature = tape.scalar(f);
            if w.gamma > 0.0 {
                terms.push(tape.scale(f, w.gamma));
            }
        }
    }
    let mut total = *terms.first().ok_or_else(|| Error::config("all loss terms disabled"))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    report.combined = w.combine(report.l_hard, report.l_soft, report.l_feature);
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn uniform_student_costs_ln_classes() {
        let s = Matrix::zeros(3, 10);
        let l = hard_label_loss(&s, &s, Some(&[1, 4, 9]), LabelMode::Supervised).unwrap();
        assert!((l - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_student_costs_nothing() {
        let s = m(&[&[60.0, 0.0, 0.0]]);
        let t = m(&[&[5.0, 1.0, 0.0]]);
        let l = hard_label_loss(&s, &t, None, LabelMode::Unsupervised).unwrap();
        assert!(l < 1e-6);
        assert!(hard_label_loss(&s, &Matrix::zeros(1, 4), None, LabelMode::Unsupervised).is_err());
    }

    #[test]
    fn batch_mean_of_sample_losses() {
        let s = m(&[&[1.0, 2.0, 0.5], &[0.0, -1.0, 3.0]]);
        let labels = [2, 0];
        let whole = hard_label_loss(&s, &s, Some(&labels), LabelMode::Supervised).unwrap();
        let a = hard_label_loss(&m(&[&[1.0, 2.0, 0.5]]), &m(&[&[0.0; 3]]), Some(&[2]), LabelMode::Supervised);
        let b = hard_label_loss(&m(&[&[0.0, -1.0, 3.0]]), &m(&[&[0.0; 3]]), Some(&[0]), LabelMode::Supervised);
        assert!((whole - (a.unwrap() + b.unwrap()) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn soft_loss_hand_value() {
        // independent evaluation: p = softmax([2,0]), q = softmax([0,2]),
        // KL = Σ p·ln(p/q) = (p0 - p1)·2 with p0 = 1/(1+e^-2)
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        let expect = (2.0 * p0 - 1.0) * 2.0;
        let l = soft_logits_loss(&m(&[&[0.0, 2.0]]), &m(&[&[2.0, 0.0]]), 1.0).unwrap();
        assert!((l as f64 - expect).abs() < 1e-5);
        assert!((l - 1.5232).abs() < 1e-4);
    }

    #[test]
    fn soft_loss_shift_invariant_and_zero_at_match() {
        let s = m(&[&[0.3, -1.0, 2.0]]);
        let t = m(&[&[1.0, 0.0, -0.5]]);
        let base = soft_logits_loss(&s, &t, 2.0).unwrap();
        let shifted = soft_logits_loss(&s.map(|v| v + 5.0), &t.map(|v| v - 3.0), 2.0).unwrap();
        assert!((base - shifted).abs() < 1e-5);
        assert_eq!(soft_logits_loss(&t, &t, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn feature_loss_gating_and_mean() {
        let a = Matrix::filled(4, 2, 0.0);
        // two samples of two token rows each
        let t1 = Matrix::filled(4, 2, 0.2f32.sqrt());
        let t2 = Matrix::filled(4, 2, 0.4f32.sqrt());
        let (total, map) = feature_loss(&[a.clone(), a.clone()], &[t1, t2], &[true, true], &[0, 1]).unwrap();
        assert!((total - 0.3).abs() < 1e-6);
        assert_eq!(map.len(), 2);
        let (z, map) = feature_loss(std::slice::from_ref(&a), std::slice::from_ref(&a), &[false, false], &[0]).unwrap();
        assert_eq!(z, 0.0);
        assert!(map.is_empty());
    }

    #[test]
    fn gated_batch_equals_sub_batch() {
        let s = m(&[&[1.0, 2.0], &[0.0, 5.0], &[3.0, -1.0]]);
        let t = m(&[&[0.5, 2.5], &[9.0, 5.0], &[1.0, 1.0]]);
        let (full, _) = feature_loss(std::slice::from_ref(&s), std::slice::from_ref(&t), &[true, false, true], &[0]).unwrap();
        let keep = |x: &Matrix| m(&[x.row(0), x.row(2)]);
        let (sub, _) = feature_loss(&[keep(&s)], &[keep(&t)], &[true, true], &[0]).unwrap();
        assert!((full - sub).abs() < 1e-6);
    }

    #[test]
    fn combinations() {
        let w = LossWeights::default();
        let r = DistillReport {
            l_hard: 0.5,
            l_soft: 0.2,
            l_feature: 0.1,
            ..Default::default()
        };
        assert!((combine_prune_loss(&r, &w) - 3.0).abs() < 1e-6);
        assert!((combine_calibrate_loss(0.5, 0.2, 0.1, &w) - 3.0).abs() < 1e-6);
        let no_feat = LossWeights { gamma: 0.0, ..w };
        assert!((combine_prune_loss(&r, &no_feat) - 2.5).abs() < 1e-6);
        assert_eq!(combine_prune_loss(&DistillReport::default(), &w), 0.0);
        assert!(LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 }.validate().is_err());
    }

    #[test]
    fn factor_examples() {
        let eq = qat_weight_factors(&[0.2; 4], FactorFn::Softmax).unwrap();
        assert!(eq.factors.iter().all(|&f| (f - 0.25).abs() < 1e-12));
        let two = qat_weight_factors(&[0.1, 0.3], FactorFn::Softmax).unwrap();
        let e = (-0.5f64).exp() / ((-0.5f64).exp() + (-1.5f64).exp());
        assert!((two.factors[0] - e).abs() < 1e-6);
        assert!((two.factors[0] - 0.7311).abs() < 1e-4);
        let inv = qat_weight_factors(&[0.1, 0.3], FactorFn::Inverse).unwrap();
        assert!(inv.factors[0] > inv.factors[1]);
        let uni = qat_weight_factors(&[0.1, 0.3], FactorFn::Uniform).unwrap();
        assert_eq!(uni.factors, vec![0.5, 0.5]);
        let zeros = qat_weight_factors(&[0.0, 0.0], FactorFn::Softmax).unwrap();
        assert_eq!(zeros.factors, vec![0.5, 0.5]);
        assert!(qat_weight_factors(&[], FactorFn::Softmax).is_err());
    }

    #[test]
    fn stage_selection() {
        assert_eq!(StageSelect::Later.indices(4), vec![2, 3]);
        assert_eq!(StageSelect::All.indices(4), vec![0, 1, 2, 3]);
        assert_eq!(StageSelect::Later.indices(1), vec![0]);
    }
}
