//! Symmetric linear quantization to INT8 / INT4.
//!
//! Codes live in `[-qmax, qmax]` (127 or 7; the most negative code is never
//! used), `q(x) = clamp(round_half_even(x / scale), -qmax, qmax)` and
//! `dq(n) = n * scale`. Weights carry one scale per output channel (matrix
//! row); activations carry a single per-tensor scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Smallest scale ever produced by calibration.
pub const MIN_SCALE: f32 = 1e-12;

/// EMA momentum for activation scales during QAT.
pub const ACT_EMA_MOMENTUM: f32 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitWidth {
    Int8,
    Int4,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Int8 => 8,
            BitWidth::Int4 => 4,
        }
    }

    pub fn qmax(self) -> i32 {
        match self {
            BitWidth::Int8 => 127,
            BitWidth::Int4 => 7,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            8 => Some(BitWidth::Int8),
            4 => Some(BitWidth::Int4),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    /// One scale per matrix row (output channel of a weight).
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CalibMethod {
    Amax,
    /// `p`-quantile of `|t|`, nearest-rank, `p` in `(0, 1]`.
    Percentile(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    pub bits: BitWidth,
    /// Length 1 for per-tensor, one per row for per-channel.
    pub scales: Vec<f32>,
}

impl QuantParams {
    pub fn per_tensor(bits: BitWidth, scale: f32) -> Result<Self> {
        Self::new(bits, vec![scale])
    }

    pub fn new(bits: BitWidth, scales: Vec<f32>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::config("quant params need at least one scale"));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::config(format!("invalid quant scale {s}")));
        }
        Ok(Self { bits, scales })
    }

    pub fn qmax(&self) -> i32 {
        self.bits.qmax()
    }

    pub fn granularity(&self) -> Granularity {
        if self.scales.len() == 1 {
            Granularity::PerTensor
        } else {
            Granularity::PerChannel
        }
    }

    /// Scale applying to row `r`.
    #[inline]
    pub fn scale_for_row(&self, r: usize) -> f32 {
        if self.scales.len() == 1 {
            self.scales[0]
        } else {
            self.scales[r]
        }
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if self.scales.len() != 1 && self.scales.len() != rows {
            return Err(Error::shape(format!(
                "{} per-channel scales for {rows} rows",
                self.scales.len()
            )));
        }
        Ok(())
    }
}

/// Result of [`calibrate`]; `degenerate` is set when some scale hit the
/// [`MIN_SCALE`] floor (an all-zero tensor or channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub params: QuantParams,
    pub degenerate: bool,
}

fn range_of(values: impl Iterator<Item = f32>, method: CalibMethod) -> f32 {
    match method {
        CalibMethod::Amax => values.fold(0.0f32, |m, v| m.max(v.abs())),
        CalibMethod::Percentile(p) => {
            let mut abs: Vec<f32> = values.map(f32::abs).collect();
            if abs.is_empty() {
                return 0.0;
            }
            abs.sort_by(f32::total_cmp);
            let rank = ((p * abs.len() as f64).ceil() as usize).clamp(1, abs.len());
            abs[rank - 1]
        }
    }
}

pub fn calibrate(
    t: &Matrix,
    bits: BitWidth,
    granularity: Granularity,
    method: CalibMethod,
) -> Result<Calibration> {
    if t.is_empty() {
        return Err(Error::shape("cannot calibrate an empty tensor"));
    }
    if let CalibMethod::Percentile(p) = method {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::config(format!("percentile {p} outside (0, 1]")));
        }
    }
    let qmax = bits.qmax() as f32;
    let ranges: Vec<f32> = match granularity {
        Granularity::PerTensor => vec![range_of(t.data().iter().copied(), method)],
        Granularity::PerChannel => (0..t.rows())
            .map(|r| range_of(t.row(r).iter().copied(), method))
            .collect(),
    };
    let mut degenerate = false;
    let scales = ranges
        .into_iter()
        .map(|r| {
            let s = r / qmax;
            if s < MIN_SCALE {
                degenerate = true;
                MIN_SCALE
            } else {
                s
            }
        })
        .collect();
    if degenerate {
        log::warn!("calibration found an all-zero range; scale floored at {MIN_SCALE}");
    }
    Ok(Calibration {
        params: QuantParams::new(bits, scales)?,
        degenerate,
    })
}

/// Integer codes plus the parameters that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
    pub params: QuantParams,
}

#[inline]
pub fn quantize_value(x: f32, scale: f32, qmax: i32) -> i32 {
    let q = (x / scale).round_ties_even();
    q.clamp(-(qmax as f32), qmax as f32) as i32
}

#[inline]
pub fn fake_quant_value(x: f32, scale: f32, qmax: i32) -> f32 {
    quantize_value(x, scale, qmax) as f32 * scale
}

pub fn quantize(t: &Matrix, q: &QuantParams) -> Result<QuantizedMatrix> {
    q.check_rows(t.rows())?;
    let qmax = q.qmax();
    let mut codes = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let s = q.scale_for_row(r);
        codes.extend(t.row(r).iter().map(|&x| quantize_value(x, s, qmax) as i8));
    }
    Ok(QuantizedMatrix {
        rows: t.rows(),
        cols: t.cols(),
        codes,
        params: q.clone(),
    })
}

pub fn dequantize(qt: &QuantizedMatrix) -> Matrix {
    let mut data = Vec::with_capacity(qt.codes.len());
    for r in 0..qt.rows {
        let s = qt.params.scale_for_row(r);
        data.extend(
            qt.codes[r * qt.cols..(r + 1) * qt.cols]
                .iter()
                .map(|&n| n as f32 * s),
        );
    }
    Matrix::from_raw(qt.rows, qt.cols, data)
}

/// `dequantize(quantize(t))` without materializing the codes.
pub fn fake_quant(t: &Matrix, q: &QuantParams) -> Result<Matrix> {
    q.check_rows(t.rows())?;
    let qmax = q.qmax();
    let mut out = t.clone();
    for r in 0..t.rows() {
        let s = q.scale_for_row(r);
        for v in out.row_mut(r) {
            *v = fake_quant_value(*v, s, qmax);
        }
    }
    Ok(out)
}

/// Straight-through gate: true where the gradient passes, i.e.
/// `|x| <= qmax * scale` (boundary included).
pub fn ste_gate(t: &Matrix, q: &QuantParams) -> Result<Vec<bool>> {
    q.check_rows(t.rows())?;
    let qmax = q.qmax() as f32;
    let mut gate = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let limit = qmax * q.scale_for_row(r);
        gate.extend(t.row(r).iter().map(|x| x.abs() <= limit));
    }
    Ok(gate)
}

/// One exponential-moving-average step of an activation scale.
pub fn ema_scale(old: f32, batch_amax: f32, bits: BitWidth) -> f32 {
    let observed = (batch_amax / bits.qmax() as f32).max(MIN_SCALE);
    (ACT_EMA_MOMENTUM * old + (1.0 - ACT_EMA_MOMENTUM) * observed).max(MIN_SCALE)
}

/// True when every value of `t` is exactly `n * scale` for an integer code
/// `n` within range.
pub fn on_grid(t: &Matrix, q: &QuantParams) -> bool {
    match fake_quant(t, q) {
        Ok(fq) => fq
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0)),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{random_matrix, Dist, Rng};
    use proptest::prelude::*;

    fn row(v: &[f32]) -> Matrix {
        Matrix::from_rows(&[v]).unwrap()
    }

    #[test]
    fn amax_examples() {
        let c = calibrate(&row(&[-1.0, 0.5]), BitWidth::Int8, Granularity::PerTensor, CalibMethod::Amax)
            .unwrap();
        assert_eq!(c.params.scales, vec![1.0 / 127.0]);
        assert!(!c.degenerate);

        let c = calibrate(&row(&[0.0]), BitWidth::Int8, Granularity::PerTensor, CalibMethod::Amax).unwrap();
        assert_eq!(c.params.scales, vec![MIN_SCALE]);
        assert!(c.degenerate);

        let c = calibrate(&row(&[-7.0, 7.0]), BitWidth::Int4, Granularity::PerTensor, CalibMethod::Amax)
            .unwrap();
        assert_eq!(c.params.scales, vec![1.0]);
    }

    #[test]
    fn per_channel_and_percentile() {
        let t = Matrix::from_rows(&[[1.0, -2.0], [0.0, 0.0], [3.5, 0.5]]).unwrap();
        let c = calibrate(&t, BitWidth::Int4, Granularity::PerChannel, CalibMethod::Amax).unwrap();
        assert_eq!(c.params.scales, vec![2.0 / 7.0, MIN_SCALE, 0.5]);
        assert!(c.degenerate);

        let t = row(&(1..=100).map(|i| i as f32).collect::<Vec<_>>());
        let c = calibrate(&t, BitWidth::Int8, Granularity::PerTensor, CalibMethod::Percentile(0.9)).unwrap();
        assert_eq!(c.params.scales, vec![90.0 / 127.0]);
        assert!(calibrate(&t, BitWidth::Int8, Granularity::PerTensor, CalibMethod::Percentile(0.0)).is_err());
        assert!(calibrate(&Matrix::zeros(0, 0), BitWidth::Int8, Granularity::PerTensor, CalibMethod::Amax).is_err());
    }

    #[test]
    fn half_rounds_to_even() {
        let q = QuantParams::per_tensor(BitWidth::Int8, 1.0 / 127.0).unwrap();
        let qt = quantize(&row(&[0.5]), &q).unwrap();
        assert_eq!(qt.codes, vec![64]);
        let dq = dequantize(&qt).get(0, 0);
        assert!((dq - 0.503_937).abs() < 1e-5, "{dq}");

        let unit = QuantParams::per_tensor(BitWidth::Int8, 1.0).unwrap();
        assert_eq!(quantize(&row(&[2.5, 3.5, -2.5]), &unit).unwrap().codes, vec![2, 4, -2]);
    }

    #[test]
    fn clamps_out_of_range() {
        let q = QuantParams::per_tensor(BitWidth::Int4, 1.0).unwrap();
        assert_eq!(fake_quant(&row(&[9.0, -100.0]), &q).unwrap().data(), &[7.0, -7.0]);
        let q8 = QuantParams::per_tensor(BitWidth::Int8, 0.1).unwrap();
        assert_eq!(quantize(&row(&[1e6]), &q8).unwrap().codes, vec![127]);
    }

    #[test]
    fn grid_points_are_fixed() {
        let s = 0.25f32;
        let q = QuantParams::per_tensor(BitWidth::Int8, s).unwrap();
        let grid = row(&[-1.0, 0.0, 0.25, 3.0]);
        assert_eq!(fake_quant(&grid, &q).unwrap(), grid);
        let off = grid.map(|v| v + s / 4.0);
        assert_eq!(fake_quant(&off, &q).unwrap(), grid);
        assert!(on_grid(&grid, &q));
        assert!(!on_grid(&off, &q));
    }

    #[test]
    fn ste_boundary_is_inclusive() {
        let q = QuantParams::per_tensor(BitWidth::Int4, 1.0).unwrap();
        assert_eq!(ste_gate(&row(&[7.0, -7.0, 7.01, 0.0]), &q).unwrap(), vec![true, true, false, true]);
    }

    #[test]
    fn ema_moves_toward_observation() {
        let s = ema_scale(1.0, 127.0 * 2.0, BitWidth::Int8);
        assert!((s - (0.95 + 0.05 * 2.0)).abs() < 1e-6);
    }

    #[test]
    fn scale_count_must_match_rows() {
        let q = QuantParams::new(BitWidth::Int8, vec![1.0, 1.0]).unwrap();
        assert!(fake_quant(&Matrix::zeros(3, 2), &q).is_err());
        assert!(QuantParams::new(BitWidth::Int8, vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn fake_quant_is_idempotent_and_monotone(seed in any::<u64>(), scale in 1e-3f32..1.0, int4 in any::<bool>()) {
            let bits = if int4 { BitWidth::Int4 } else { BitWidth::Int8 };
            let q = QuantParams::per_tensor(bits, scale).unwrap();
            let t = random_matrix(&mut Rng::new(seed), 1, 64, Dist::Normal { mu: 0.0, sigma: 2.0 }).unwrap();
            let once = fake_quant(&t, &q).unwrap();
            prop_assert_eq!(&fake_quant(&once, &q).unwrap(), &once);
            let mut order: Vec<usize> = (0..64).collect();
            order.sort_by(|&a, &b| t.data()[a].total_cmp(&t.data()[b]));
            for w in order.windows(2) {
                prop_assert!(once.data()[w[0]] <= once.data()[w[1]]);
            }
            let limit = q.qmax() as f32 * scale;
            for (x, y) in t.data().iter().zip(once.data()) {
                if x.abs() <= limit {
                    prop_assert!((x - y).abs() <= scale / 2.0 * (1.0 + 1e-5));
                }
            }
        }

        #[test]
        fn masked_zeros_stay_zero(seed in any::<u64>()) {
            let w = random_matrix(&mut Rng::new(seed), 4, 16, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
            let mask = crate::sparsity::select_mask_2of4(&w).unwrap();
            let masked = crate::sparsity::apply_mask(&w, &mask).unwrap();
            let q = calibrate(&masked, BitWidth::Int4, Granularity::PerChannel, CalibMethod::Amax).unwrap().params;
            let fq = fake_quant(&masked, &q).unwrap();
            for (i, &keep) in mask.bits().iter().enumerate() {
                if !keep {
                    prop_assert_eq!(fq.data()[i], 0.0);
                }
            }
        }
    }
}
