//! Dense matrices and 4-D tensors in FP32, a seeded random source, and the
//! dense GEMM every sparse or quantized product is checked against.

use std::fmt;

use num_traits::{Float, NumAssign};
use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Element type of a [`Matrix`]. Everything in the pipeline runs in `f32`;
/// `f64` exists so gradient code can be checked against finite differences
/// without FP32 rounding noise.
pub trait Scalar: Float + NumAssign + Default + fmt::Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Row-major matrix, FP32 unless stated otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix, checking the length and that every value is finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Range(format!("non-finite value at index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for internal kernels that already own a buffer
    /// of the right length.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![T::zero(); self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape(), "zip_map")?;
        Ok(Self::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Largest absolute value, 0 for an empty matrix.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Converts element type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .map(|v| U::from(*v).expect("finite float converts"))
                .collect(),
        )
    }

    pub(crate) fn expect_shape(&self, shape: (usize, usize), what: &str) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::shape(format!(
                "{what}: expected {}x{}, got {}x{}",
                shape.0, shape.1, self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Batched images in N-C-H-W order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "{n}x{c}x{h}x{w} tensor needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    /// Gathers the listed images into a new batch.
    pub fn select(&self, indices: &[usize]) -> Tensor4 {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        Tensor4 {
            n: indices.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// View of the whole tensor as an `(n, c·h·w)` matrix.
    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_raw(self.n, self.image_len(), self.data.clone())
    }
}

/// `C = A·B` with FP32 accumulation. Each output element is accumulated
/// over `k` in ascending order starting from `+0.0`.
pub fn dense_gemm<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "gemm inner dimensions differ: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(gemm_unchecked(a, b))
}

pub(crate) fn gemm_unchecked<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    gemm_strided(StridedA::normal(a), b)
}

/// `Aᵀ·B` without materializing the transpose. Accumulation order is the
/// same as `gemm_unchecked(&a.transpose(), b)`, so results are identical.
pub(crate) fn gemm_tn_unchecked<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    gemm_strided(
        StridedA {
            data: &a.data,
            rows: a.cols,
            inner: a.rows,
            rs: 1,
            cs: a.cols,
        },
        b,
    )
}

/// Left operand addressed as `data[i·rs + k·cs]`.
#[derive(Clone, Copy)]
struct StridedA<'a, T> {
    data: &'a [T],
    rows: usize,
    inner: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> StridedA<'a, T> {
    fn normal(a: &'a Matrix<T>) -> Self {
        Self {
            data: &a.data,
            rows: a.rows,
            inner: a.cols,
            rs: a.cols,
            cs: 1,
        }
    }
}

fn gemm_strided<T: Scalar>(a: StridedA<'_, T>, b: &Matrix<T>) -> Matrix<T> {
    debug_assert_eq!(a.inner, b.rows);
    let (m, n) = (a.rows, b.cols);
    let mut c = vec![T::zero(); m * n];
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_kernel_avx2(a, b, &mut c) };
            return Matrix::from_raw(m, n, c);
        }
    }
    gemm_kernel(a, b, &mut c);
    Matrix::from_raw(m, n, c)
}

// Same kernel compiled with wider vectors. Only separate IEEE multiplies and
// adds are emitted (no FMA), so results are identical on every path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_kernel_avx2<T: Scalar>(a: StridedA<'_, T>, b: &Matrix<T>, c: &mut [T]) {
    gemm_kernel(a, b, c)
}


#[inline(always)]
fn gemm_kernel<T: Scalar>(a: StridedA<'_, T>, b: &Matrix<T>, c: &mut [T]) {
    const MR: usize = 4;
    const NR: usize = 16;
    let (m, k, n) = (a.rows, a.inner, b.cols);
    let (ad, bd) = (a.data, &b.data);
    // Register tiles of MR x NR outputs. Each output still accumulates over
    // k in ascending order from zero, so results match the plain ikj loop
    // bit for bit.
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for kk in 0..k {
                let b_row: &[T; NR] = bd[kk * n + j0..kk * n + j0 + NR].try_into().expect("tile");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let aik = ad[(i0 + r) * a.rs + kk * a.cs];
                    for (cv, &bv) in acc_r.iter_mut().zip(b_row) {
                        *cv += aik * bv;
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_r);
            }
        }
    }
    gemm_edge(a, b, c, 0..m_full, n_full..n);
    gemm_edge(a, b, c, m_full..m, 0..n);
}

// Plain ikj loop over a block of outputs. Kept as a function rather than a
// closure so it inherits the caller's target features when inlined.
#[inline(always)]
fn gemm_edge<T: Scalar>(
    a: StridedA<'_, T>,
    b: &Matrix<T>,
    c: &mut [T],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) {
    let (k, n) = (a.inner, b.cols);
    let bd = &b.data;
    for i in rows {
        let c_row = &mut c[i * n + cols.start..i * n + cols.end];
        for kk in 0..k {
            let aik = a.data[i * a.rs + kk * a.cs];
            let b_row = &bd[kk * n + cols.start..kk * n + cols.end];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// Sampling distribution for [`random_matrix`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dist {
    Uniform { lo: f32, hi: f32 },
    Normal { mu: f32, sigma: f32 },
}

/// Seeded random source.
///
/// Backed by ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), whose stream
/// is fixed by the seed on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator derived from this one's seed material and a
    /// stream id, leaving `self` untouched.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = self.inner.clone();
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        if hi <= lo {
            return lo;
        }
        let u: f32 = self.inner.random();
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self, mu: f32, sigma: f32) -> f32 {
        if sigma == 0.0 {
            return mu;
        }
        Normal::new(mu, sigma)
            .expect("sigma checked by caller")
            .sample(&mut self.inner)
    }

    /// Normal sample redrawn until it lies within two standard deviations.
    pub fn truncated_normal(&mut self, sigma: f32) -> f32 {
        loop {
            let v = self.normal(0.0, sigma);
            if v.abs() <= 2.0 * sigma {
                return v;
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, dist: Dist) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::config("random_matrix needs rows, cols >= 1"));
    }
    let data = match dist {
        Dist::Uniform { lo, hi } => {
            if !(lo.is_finite() && hi.is_finite()) || hi < lo {
                return Err(Error::config(format!("invalid uniform({lo}, {hi})")));
            }
            (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect()
        }
        Dist::Normal { mu, sigma } => {
            if !(mu.is_finite() && sigma.is_finite()) || sigma < 0.0 {
                return Err(Error::config(format!("invalid normal({mu}, {sigma})")));
            }
            (0..rows * cols).map(|_| rng.normal(mu, sigma)).collect()
        }
    };
    Ok(Matrix::from_raw(rows, cols, data))
}

/// Random matrix with integer entries drawn uniformly from `[lo, hi]`.
pub fn random_int_matrix(rng: &mut Rng, rows: usize, cols: usize, lo: i32, hi: i32) -> Matrix {
    let span = (hi - lo + 1) as usize;
    let data = (0..rows * cols)
        .map(|_| (lo + rng.below(span) as i32) as f32)
        .collect();
    Matrix::from_raw(rows, cols, data)
}
