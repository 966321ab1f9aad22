//! Structured sparsity masks: 2:4 per row group, and the paired 4:8 variant
//! used by INT4 where kept values come in aligned two-wide sub-chunks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SparsityPattern {
    /// Exactly two kept values in every aligned group of four.
    TwoOfFour,
    /// Exactly four kept values in every aligned group of eight, as two
    /// whole two-wide sub-chunks.
    PairedFourOfEight,
}

impl SparsityPattern {
    /// Width of one aligned group.
    pub fn group(self) -> usize {
        match self {
            SparsityPattern::TwoOfFour => 4,
            SparsityPattern::PairedFourOfEight => 8,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            SparsityPattern::TwoOfFour => 0,
            SparsityPattern::PairedFourOfEight => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SparsityPattern::TwoOfFour),
            1 => Some(SparsityPattern::PairedFourOfEight),
            _ => None,
        }
    }
}

/// Keep/drop flag per element of a weight matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
    pattern: SparsityPattern,
}

impl SparsityMask {
    /// Wraps raw keep flags. The result may be illegal; see [`validate_mask`].
    pub fn from_bits(
        rows: usize,
        cols: usize,
        bits: Vec<bool>,
        pattern: SparsityPattern,
    ) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask {rows}x{cols} needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            bits,
            pattern,
        })
    }

    /// Mask that keeps everything, tagged with `pattern`. Not pattern-legal.
    pub fn all_ones(rows: usize, cols: usize, pattern: SparsityPattern) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
            pattern,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pattern(&self) -> SparsityPattern {
        self.pattern
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn keep(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mask as a 0/1 matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Outcome of [`validate_mask`]: one `(row, group)` entry per illegal group.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<(usize, usize)>,
    /// Set when the column count is not a multiple of the group width; no
    /// group-level checks are meaningful then.
    pub bad_width: bool,
}

impl ValidationReport {
    pub fn is_legal(&self) -> bool {
        self.violations.is_empty() && !self.bad_width
    }
}

fn check_width(w: &Matrix, group: usize) -> Result<()> {
    if w.cols() % group != 0 {
        return Err(Error::shape(format!(
            "{} columns are not divisible by {group}",
            w.cols()
        )));
    }
    Ok(())
}

/// Indices of the two largest scores, ties going to the lower index,
/// returned in ascending order.
fn top_two(scores: &[f32]) -> (usize, usize) {
    let mut first = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[first] {
            first = i;
        }
    }
    let mut second = usize::MAX;
    for i in 0..scores.len() {
        if i != first && (second == usize::MAX || scores[i] > scores[second]) {
            second = i;
        }
    }
    (first.min(second), first.max(second))
}

/// Keeps the two largest-magnitude entries of every aligned group of four.
pub fn select_mask_2of4(w: &Matrix) -> Result<SparsityMask> {
    check_width(w, 4)?;
    let mut bits = vec![false; w.len()];
    for r in 0..w.rows() {
        for (g, chunk) in w.row(r).chunks_exact(4).enumerate() {
            let scores: [f32; 4] = std::array::from_fn(|i| chunk[i].abs());
            let (a, b) = top_two(&scores);
            let base = r * w.cols() + g * 4;
            bits[base + a] = true;
            bits[base + b] = true;
        }
    }
    SparsityMask::from_bits(w.rows(), w.cols(), bits, SparsityPattern::TwoOfFour)
}

/// Keeps the two two-wide sub-chunks with the largest `|w0| + |w1|` in
/// every aligned group of eight.
pub fn select_mask_4of8_paired(w: &Matrix) -> Result<SparsityMask> {
    check_width(w, 8)?;
    let mut bits = vec![false; w.len()];
    for r in 0..w.rows() {
        for (g, chunk) in w.row(r).chunks_exact(8).enumerate() {
            let scores: [f32; 4] = std::array::from_fn(|i| chunk[2 * i].abs() + chunk[2 * i + 1].abs());
            let (a, b) = top_two(&scores);
            let base = r * w.cols() + g * 8;
            for s in [a, b] {
                bits[base + 2 * s] = true;
                bits[base + 2 * s + 1] = true;
            }
        }
    }
    SparsityMask::from_bits(w.rows(), w.cols(), bits, SparsityPattern::PairedFourOfEight)
}

/// Selects the mask for `pattern` by magnitude.
pub fn select_mask(w: &Matrix, pattern: SparsityPattern) -> Result<SparsityMask> {
    match pattern {
        SparsityPattern::TwoOfFour => select_mask_2of4(w),
        SparsityPattern::PairedFourOfEight => select_mask_4of8_paired(w),
    }
}

pub fn validate_mask(mask: &SparsityMask) -> ValidationReport {
    let group = mask.pattern.group();
    if !mask.cols.is_multiple_of(group) {
        return ValidationReport {
            violations: Vec::new(),
            bad_width: true,
        };
    }
    let mut violations = Vec::new();
    for r in 0..mask.rows {
        let row = &mask.bits[r * mask.cols..(r + 1) * mask.cols];
        for (g, chunk) in row.chunks_exact(group).enumerate() {
            let kept = chunk.iter().filter(|&&b| b).count();
            let ok = match mask.pattern {
                SparsityPattern::TwoOfFour => kept == 2,
                SparsityPattern::PairedFourOfEight => {
                    kept == 4 && chunk.chunks_exact(2).all(|p| p[0] == p[1])
                }
            };
            if !ok {
                violations.push((r, g));
            }
        }
    }
    ValidationReport {
        violations,
        bad_width: false,
    }
}

/// Zeroes every dropped position.
pub fn apply_mask(w: &Matrix, mask: &SparsityMask) -> Result<Matrix> {
    if w.shape() != (mask.rows, mask.cols) {
        return Err(Error::shape(format!(
            "mask {}x{} does not match weight {}x{}",
            mask.rows,
            mask.cols,
            w.rows(),
            w.cols()
        )));
    }
    let data = w
        .data()
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    Ok(Matrix::from_raw(w.rows(), w.cols(), data))
}

/// In-place variant used by the optimizer to keep pruned weights at zero.
pub(crate) fn zero_dropped(w: &mut Matrix, mask: &SparsityMask) {
    for (v, &k) in w.data_mut().iter_mut().zip(&mask.bits) {
        if !k {
            *v = 0.0;
        }
    }
}
