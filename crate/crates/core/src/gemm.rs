//! Emulated sparse GEMM over packed 2:4 / 4:8 matrices.
//!
//! The product walks only the stored non-zeros of `A` and gathers the
//! matching rows of `B` through the metadata, so it performs exactly half
//! the multiply-accumulates of the dense product. Cost is reported as an
//! abstract MAC count: a dense `M x K x N` product costs `T = M·N·K`, the
//! sparse one `T/2`.

use crate::error::{Error, Result};
use crate::format::{ElementFormat, PackedSparseMatrix};
use crate::numerics::{Matrix, Tensor4};
use crate::quant::QuantizedMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GemmCostReport {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Multiply-accumulates actually performed.
    pub macs: u64,
    /// Cycle model: `macs` in units where the dense product takes `m·n·k`.
    pub model_cycles: u64,
}

impl GemmCostReport {
    pub fn dense(m: usize, n: usize, k: usize) -> Self {
        let macs = (m * n * k) as u64;
        Self {
            m,
            n,
            k,
            macs,
            model_cycles: macs,
        }
    }

    pub fn sparse(m: usize, n: usize, k: usize) -> Self {
        let macs = (m * n * k / 2) as u64;
        Self {
            m,
            n,
            k,
            macs,
            model_cycles: macs,
        }
    }

    /// Two FLOPs per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

fn check_dims(a: &PackedSparseMatrix, b_rows: usize, b_cols: usize) -> Result<()> {
    if a.cols() != b_rows {
        return Err(Error::shape(format!(
            "sparse gemm inner dimensions differ: {}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b_rows,
            b_cols
        )));
    }
    Ok(())
}

/// `C = A·B` using only the stored entries of `A`. Each output element is
/// accumulated in ascending `k` order from `+0.0`, so the result matches
/// [`crate::numerics::dense_gemm`] on the unpacked `A` bit for bit when all
/// inputs are finite.
pub fn sparse_gemm(a: &PackedSparseMatrix, b: &Matrix) -> Result<(Matrix, GemmCostReport)> {
    sparse_gemm_impl(a, b, None)
}

/// Same as [`sparse_gemm`], also recording every `(a_row, b_row)` gather.
#[allow(clippy::type_complexity)]
pub fn sparse_gemm_traced(
    a: &PackedSparseMatrix,
    b: &Matrix,
) -> Result<(Matrix, GemmCostReport, Vec<(usize, usize)>)> {
    let mut trace = Vec::new();
    let (c, report) = sparse_gemm_impl(a, b, Some(&mut trace))?;
    Ok((c, report, trace))
}

fn sparse_gemm_impl(
    a: &PackedSparseMatrix,
    b: &Matrix,
    mut trace: Option<&mut Vec<(usize, usize)>>,
) -> Result<(Matrix, GemmCostReport)> {
    check_dims(a, b.rows(), b.cols())?;
    a.check()?;
    let (m, n, k) = (a.rows(), b.cols(), a.cols());
    let mut c = vec![0.0f32; m * n];
    let mut macs = 0u64;
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, v) in a.row_entries(i) {
            if let Some(t) = trace.as_deref_mut() {
                t.push((i, kk));
            }
            for (cv, &bv) in c_row.iter_mut().zip(b.row(kk)) {
                *cv += v * bv;
            }
            macs += n as u64;
        }
    }
    let report = GemmCostReport::sparse(m, n, k);
    debug_assert_eq!(report.macs, macs);
    Ok((Matrix::from_raw(m, n, c), report))
}

/// Integer sparse GEMM: codes of `A` times codes of `B` in 32-bit
/// accumulators, then dequantized by `scale_a[row] * scale_b`.
/// `B` must carry a single per-tensor scale.
pub fn sparse_gemm_quantized(
    a: &PackedSparseMatrix,
    b: &QuantizedMatrix,
) -> Result<(Matrix, GemmCostReport)> {
    check_dims(a, b.rows, b.cols)?;
    a.check()?;
    if a.format() == ElementFormat::Fp16 {
        return Err(Error::config("integer gemm needs an INT8 or INT4 matrix"));
    }
    if b.params.scales.len() != 1 {
        return Err(Error::config("integer gemm needs a per-tensor scale on B"));
    }
    let (m, n, k) = (a.rows(), b.cols, a.cols());
    let scale_b = b.params.scales[0];
    let mut c = vec![0.0f32; m * n];
    let mut acc = vec![0i32; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0);
        for (kk, code) in a.row_codes(i)? {
            let b_row = &b.codes[kk * n..(kk + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(b_row) {
                *s += code * bv as i32;
            }
        }
        let scale = a.quant().map_or(1.0, |q| q.scale_for_row(i)) * scale_b;
        for (cv, &s) in c[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *cv = s as f32 * scale;
        }
    }
    Ok((Matrix::from_raw(m, n, c), GemmCostReport::sparse(m, n, k)))
}

/// Flattens non-overlapping `patch x patch` windows into rows.
///
/// Row order is `(n, patch_row, patch_col)`; column order within a row is
/// `(channel, y, x)`, matching a convolution weight laid out as
/// `[out, in, patch, patch]`.
pub fn im2col(x: &Tensor4, patch: usize) -> Result<Matrix> {
    if patch == 0 || !x.h.is_multiple_of(patch) || !x.w.is_multiple_of(patch) {
        return Err(Error::shape(format!(
            "{}x{} image is not divisible into {patch}x{patch} patches",
            x.h, x.w
        )));
    }
    let (gh, gw) = (x.h / patch, x.w / patch);
    let width = x.c * patch * patch;
    let mut out = Vec::with_capacity(x.n * gh * gw * width);
    for n in 0..x.n {
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..x.c {
                    for y in 0..patch {
                        for xx in 0..patch {
                            out.push(x.get(n, c, py * patch + y, px * patch + xx));
                        }
                    }
                }
            }
        }
    }
    Ok(Matrix::from_raw(x.n * gh * gw, width, out))
}

/// Strided patch-embedding convolution executed as a sparse implicit GEMM.
///
/// `w` is the packed `[d_embed, c·patch·patch]` weight. Returns one row per
/// patch token in `(n, patch_row, patch_col)` order.
pub fn implicit_gemm_conv(
    x: &Tensor4,
    w: &PackedSparseMatrix,
    patch: usize,
) -> Result<(Matrix, GemmCostReport)> {
    let cols = im2col(x, patch)?;
    if w.cols() != cols.cols() {
        return Err(Error::shape(format!(
            "weight width {} does not match c·p·p = {}",
            w.cols(),
            cols.cols()
        )));
    }
    let (out_t, report) = sparse_gemm(w, &cols.transpose())?;
    Ok((out_t.transpose(), report))
}

/// FLOPs of a dense patch-embedding convolution, `2·N·C·H·W·D`.
pub fn patch_embed_flops(n: u64, c: u64, h: u64, w: u64, d_embed: u64) -> u64 {
    2 * n * c * h * w * d_embed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{pack, unpack};
    use crate::numerics::{dense_gemm, random_int_matrix, random_matrix, Dist, Rng};
    use crate::quant::{quantize, QuantParams, BitWidth};
    use crate::sparsity::{select_mask, select_mask_2of4};

    #[test]
    fn hand_example() {
        let a = Matrix::from_rows(&[[0.0, 2.0, 0.0, 3.0]]).unwrap();
        let p = pack(&a, &select_mask_2of4(&a).unwrap(), ElementFormat::Fp16, None).unwrap();
        let (c, r) = sparse_gemm(&p, &Matrix::filled(4, 1, 1.0)).unwrap();
        assert_eq!(c.data(), &[5.0]);
        assert_eq!(r.macs, 2);
    }

    #[test]
    fn mac_model_square() {
        assert_eq!(GemmCostReport::dense(4, 4, 4).macs, 64);
        assert_eq!(GemmCostReport::sparse(4, 4, 4).macs, 32);
    }

    #[test]
    fn matches_dense_oracle_on_integers() {
        let mut rng = Rng::new(21);
        let a = random_int_matrix(&mut rng, 8, 16, -7, 7);
        let b = random_int_matrix(&mut rng, 16, 8, -4, 4);
        for fmt in [ElementFormat::Int8, ElementFormat::Int4, ElementFormat::Fp16] {
            let p = pack(&a, &select_mask(&a, fmt.pattern()).unwrap(), fmt, None).unwrap();
            let (c, r) = sparse_gemm(&p, &b).unwrap();
            assert_eq!(c, dense_gemm(&unpack(&p).unwrap(), &b).unwrap());
            assert_eq!(r.macs * 2, 8 * 8 * 16);
        }
    }

    #[test]
    fn gathers_only_metadata_rows() {
        let mut rng = Rng::new(4);
        let a = random_int_matrix(&mut rng, 3, 8, -3, 3);
        let b = random_int_matrix(&mut rng, 8, 2, -3, 3);
        for fmt in [ElementFormat::Int8, ElementFormat::Int4] {
            let mask = select_mask(&a, fmt.pattern()).unwrap();
            let p = pack(&a, &mask, fmt, None).unwrap();
            let (_, _, trace) = sparse_gemm_traced(&p, &b).unwrap();
            assert_eq!(trace.len(), 3 * 4);
            for (i, k) in trace {
                assert!(mask.keep(i, k), "row {i} gathered B row {k}");
            }
        }
    }

    #[test]
    fn integer_path_matches_float_path() {
        let mut rng = Rng::new(8);
        let a = random_int_matrix(&mut rng, 4, 16, -7, 7);
        let bf = random_int_matrix(&mut rng, 16, 5, -100, 100);
        let p = pack(&a, &select_mask(&a, ElementFormat::Int4.pattern()).unwrap(), ElementFormat::Int4, None)
            .unwrap();
        let bq = quantize(&bf, &QuantParams::per_tensor(BitWidth::Int8, 1.0).unwrap()).unwrap();
        let (ci, _) = sparse_gemm_quantized(&p, &bq).unwrap();
        let (cf, _) = sparse_gemm(&p, &bf).unwrap();
        assert_eq!(ci, cf);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Matrix::zeros(2, 8);
        let p = pack(&a, &select_mask_2of4(&a).unwrap(), ElementFormat::Int8, None).unwrap();
        assert!(matches!(sparse_gemm(&p, &Matrix::zeros(4, 2)), Err(Error::Shape(_))));
    }

    /// Direct strided convolution, no im2col.
    fn conv_oracle(x: &Tensor4, w: &Matrix, p: usize) -> Matrix {
        let (gh, gw) = (x.h / p, x.w / p);
        let d = w.rows();
        let mut out = Matrix::zeros(x.n * gh * gw, d);
        for n in 0..x.n {
            for py in 0..gh {
                for px in 0..gw {
                    for o in 0..d {
                        let mut s = 0.0f64;
                        for c in 0..x.c {
                            for y in 0..p {
                                for xx in 0..p {
                                    let wv = w.get(o, (c * p + y) * p + xx) as f64;
                                    s += wv * x.get(n, c, py * p + y, px * p + xx) as f64;
                                }
                            }
                        }
                        out.set((n * gh + py) * gw + px, o, s as f32);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_patch_token() {
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Matrix::from_rows(&[[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0]]).unwrap();
        let p = pack(&w, &select_mask_2of4(&w).unwrap(), ElementFormat::Fp16, None).unwrap();
        let (out, _) = implicit_gemm_conv(&x, &p, 2).unwrap();
        assert_eq!(out.data(), &[5.0, 5.0]);
    }

    #[test]
    fn implicit_conv_matches_direct_conv() {
        let mut rng = Rng::new(13);
        let data = random_matrix(&mut rng, 1, 2 * 3 * 8 * 8, Dist::Uniform { lo: -1.0, hi: 1.0 })
            .unwrap()
            .into_vec();
        let x = Tensor4::from_vec(2, 3, 8, 8, data).unwrap();
        let w = random_matrix(&mut rng, 8, 3 * 4 * 4, Dist::Normal { mu: 0.0, sigma: 0.5 }).unwrap();
        let mask = select_mask_2of4(&w).unwrap();
        let p = pack(&w, &mask, ElementFormat::Fp16, None).unwrap();
        let (out, report) = implicit_gemm_conv(&x, &p, 4).unwrap();
        let expect = conv_oracle(&x, &unpack(&p).unwrap(), 4);
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert_eq!(report.flops() * 2, patch_embed_flops(2, 3, 8, 8, 8));
        let x_bad = Tensor4::zeros(1, 3, 6, 8);
        assert!(implicit_gemm_conv(&x_bad, &p, 4).is_err());
    }

    #[test]
    fn deit_tiny_patch_flops() {
        assert_eq!(patch_embed_flops(1, 3, 224, 224, 192), 57_802_752);
    }
}
