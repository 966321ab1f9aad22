//! Define-by-run reverse-mode differentiation over matrices.
//!
//! Every op evaluates eagerly and records itself on a [`Tape`]; calling
//! [`Tape::backward`] on a 1x1 loss walks the tape in reverse and returns
//! the gradient of every node that depends on a parameter.
//!
//! The op set is what the vision transformer needs: linear layers, bias
//! broadcast, GELU (tanh form), row softmax, layer norm, fused multi-head
//! attention, token assembly, row gathers, and the distillation losses.
//! Two ops encode compression: [`Tape::mask_mul`] routes zero gradient to
//! pruned positions, and [`Tape::fake_quant`] passes gradient straight
//! through where `|x| <= qmax·scale` and blocks it outside.

// Backward passes index several per-row buffers with one counter.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::numerics::{gemm_tn_unchecked, gemm_unchecked, Matrix, Scalar};
use crate::quant::QuantParams;
use crate::sparsity::{zero_dropped, SparsityMask};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[inline]
fn lit<T: Scalar>(v: f64) -> T {
    T::from(v).expect("literal fits")
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    Linear(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// Holds dy/dx at every input element.
    Gelu(Var, Vec<T>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<Matrix<T>>,
    },
    AssembleTokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix<T>,
    },
    KlDiv {
        student: Var,
        temperature: T,
        p_student: Matrix<T>,
        p_teacher: Matrix<T>,
    },
    Mse {
        x: Var,
        target: Matrix<T>,
        row_weights: Vec<T>,
        denom: T,
    },
    FakeQuant(Var, Vec<bool>),
    MaskMul(Var, Vec<bool>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise `log_softmax`.
fn log_softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Public row softmax, used outside the tape for predictions.
pub fn softmax<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    softmax_rows(x)
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c: T = lit(SQRT_2_OVER_PI);
    let a: T = lit(GELU_CUBIC);
    let half: T = lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

/// GELU and its derivative from a single tanh evaluation.
#[inline]
fn gelu_with_grad<T: Scalar>(x: T) -> (T, T) {
    let c: T = lit(SQRT_2_OVER_PI);
    let a: T = lit(GELU_CUBIC);
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

/// Copy of the `rows x width` block starting at `(r0, c0)`.
fn block<T: Scalar>(m: &Matrix<T>, r0: usize, rows: usize, c0: usize, width: usize) -> Matrix<T> {
    let mut out = Vec::with_capacity(rows * width);
    for r in r0..r0 + rows {
        out.extend_from_slice(&m.row(r)[c0..c0 + width]);
    }
    Matrix::from_raw(rows, width, out)
}

fn add_block<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>, r0: usize, c0: usize) {
    for r in 0..src.rows() {
        let d = &mut dst.row_mut(r0 + r)[c0..c0 + src.cols()];
        for (a, &b) in d.iter_mut().zip(src.row(r)) {
            *a += b;
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::shape(format!(
                "matmul {}x{} * {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let out = gemm_unchecked(av, bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x · wᵀ` for `x: [n, k]`, `w: [m, k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() {
            return Err(Error::shape(format!(
                "linear input width {} vs weight {}x{}",
                xv.cols(),
                wv.rows(),
                wv.cols()
            )));
        }
        let out = gemm_unchecked(xv, &wv.transpose());
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Linear(x, w), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape(format!(
                "bias {}x{} for {}x{}",
                bv.rows(),
                bv.cols(),
                av.rows(),
                av.cols()
            )));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let rg = self.rg(&[a]);
        let av = self.value(a);
        let (out, slope) = if rg {
            let (mut y, mut dy) = (Vec::with_capacity(av.len()), Vec::with_capacity(av.len()));
            for &x in av.data() {
                let (v, d) = gelu_with_grad(x);
                y.push(v);
                dy.push(d);
            }
            (Matrix::from_raw(av.rows(), av.cols(), y), dy)
        } else {
            (av.map(gelu), Vec::new())
        };
        self.push(out, Op::Gelu(a, slope), rg)
    }

    /// Softmax along each row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Per-row normalization followed by `gamma ⊙ x̂ + beta`
    /// (`gamma`, `beta`: `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        for p in [gamma, beta] {
            if self.shape(p) != (1, n) {
                return Err(Error::shape(format!(
                    "layer norm parameter {:?} for width {n}",
                    self.shape(p)
                )));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let nf: T = lit(n as f64);
        let eps: T = lit(LAYER_NORM_EPS);
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / nf;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xr = xhat.row_mut(r);
            for v in xr.iter_mut() {
                *v = (*v - mean) * is;
            }
            let or = out.row_mut(r);
            for j in 0..n {
                or[j] = xhat.row(r)[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over `batch` sequences stacked along
    /// rows, with `heads` heads splitting the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(q);
        if self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::shape("attention q, k, v shapes differ"));
        }
        let (rows, d) = shape;
        if batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!(
                "attention {rows}x{d} with batch {batch}, heads {heads}"
            )));
        }
        let t = rows / batch;
        let dh = d / heads;
        let scale: T = T::one() / lit::<T>(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(rows, d);
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            for h in 0..heads {
                let qh = block(qv, b * t, t, h * dh, dh);
                let kh = block(kv, b * t, t, h * dh, dh);
                let vh = block(vv, b * t, t, h * dh, dh);
                let s = gemm_unchecked(&qh, &kh.transpose()).scale(scale);
                let p = softmax_rows(&s);
                let o = gemm_unchecked(&p, &vh);
                add_block(&mut out, &o, b * t, h * dh);
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities of an attention node, one `t x t` matrix per
    /// `(sequence, head)` in that order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Builds `[cls; patches_b] + pos` for every sequence `b`.
    ///
    /// `patches` is `[batch·n, d]`, `cls` is `1 x d`, `pos` is `(n+1) x d`.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (pr, d) = self.shape(patches);
        if batch == 0 || pr % batch != 0 {
            return Err(Error::shape(format!("{pr} patch rows for batch {batch}")));
        }
        let n = pr / batch;
        if self.shape(cls) != (1, d) || self.shape(pos) != (n + 1, d) {
            return Err(Error::shape("class token or position table shape"));
        }
        let (pv, cv, posv) = (self.value(patches), self.value(cls), self.value(pos));
        let t = n + 1;
        let mut out = Matrix::zeros(batch * t, d);
        for b in 0..batch {
            for j in 0..t {
                let src = if j == 0 { cv.row(0) } else { pv.row(b * n + j - 1) };
                let o = out.row_mut(b * t + j);
                for ((o, &s), &p) in o.iter_mut().zip(src).zip(posv.row(j)) {
                    *o = s + p;
                }
            }
        }
        let rg = self.rg(&[patches, cls, pos]);
        Ok(self.push(
            out,
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            },
            rg,
        ))
    }

    /// Gathers the listed rows.
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::shape(format!("row {bad} of {}", xv.rows())));
        }
        let mut data = Vec::with_capacity(rows.len() * xv.cols());
        for &r in &rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Matrix::from_raw(rows.len(), xv.cols(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SelectRows(x, rows), rg))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if rows * cols != xv.len() {
            return Err(Error::shape(format!(
                "cannot reshape {}x{} to {rows}x{cols}",
                xv.rows(),
                xv.cols()
            )));
        }
        let out = Matrix::from_raw(rows, cols, xv.data().to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean of all elements, as a 1x1 node.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n: T = lit(xv.len().max(1) as f64);
        let s = xv.data().iter().fold(T::zero(), |a, &b| a + b) / n;
        let rg = self.rg(&[x]);
        self.push(Matrix::filled(1, 1, s), Op::Mean(x), rg)
    }

    /// Batch-mean cross-entropy of `softmax(logits)` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::shape(format!(
                "{} targets for {} rows",
                targets.len(),
                lv.rows()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::shape(format!("target class {bad} of {}", lv.cols())));
        }
        let logp = log_softmax_rows(lv);
        let b: T = lit(lv.rows().max(1) as f64);
        let loss = targets
            .iter()
            .enumerate()
            .fold(T::zero(), |s, (r, &t)| s - logp.get(r, t))
            / b;
        let probs = logp.map(|v| v.exp());
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    /// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`, batch-averaged.
    /// The teacher side is a constant.
    pub fn kl_div(&mut self, student: Var, teacher: &Matrix<T>, temperature: T) -> Result<Var> {
        let sv = self.value(student);
        if sv.shape() != teacher.shape() {
            return Err(Error::shape(format!(
                "student logits {:?} vs teacher {:?}",
                sv.shape(),
                teacher.shape()
            )));
        }
        if temperature <= T::zero() {
            return Err(Error::config("temperature must be positive"));
        }
        let inv_t = T::one() / temperature;
        let ls = log_softmax_rows(&sv.scale(inv_t));
        let lt = log_softmax_rows(&teacher.scale(inv_t));
        let pt = lt.map(|v| v.exp());
        let b: T = lit(sv.rows().max(1) as f64);
        let mut kl = T::zero();
        for ((&p, &a), &c) in pt.data().iter().zip(lt.data()).zip(ls.data()) {
            if p > T::zero() {
                kl += p * (a - c);
            }
        }
        let loss = (temperature * temperature * kl / b).max(T::zero());
        let ps = ls.map(|v| v.exp());
        let rg = self.rg(&[student]);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::KlDiv {
                student,
                temperature,
                p_student: ps,
                p_teacher: pt,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target, restricted to rows
    /// with non-zero weight and normalized per element:
    /// `Σ_r w_r Σ_j (x − t)² / (Σ_r w_r · cols)`. Zero when every weight is 0.
    pub fn mse(&mut self, x: Var, target: &Matrix<T>, row_weights: Option<&[T]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::shape(format!(
                "mse {:?} vs target {:?}",
                xv.shape(),
                target.shape()
            )));
        }
        let weights = match row_weights {
            Some(w) if w.len() != xv.rows() => {
                return Err(Error::shape(format!("{} row weights for {} rows", w.len(), xv.rows())))
            }
            Some(w) => w.to_vec(),
            None => vec![T::one(); xv.rows()],
        };
        let wsum = weights.iter().fold(T::zero(), |a, &b| a + b);
        let denom = wsum * lit(xv.cols() as f64);
        let mut loss = T::zero();
        if denom > T::zero() {
            for r in 0..xv.rows() {
                if weights[r] == T::zero() {
                    continue;
                }
                let s = xv
                    .row(r)
                    .iter()
                    .zip(target.row(r))
                    .fold(T::zero(), |s, (&a, &b)| s + (a - b) * (a - b));
                loss += weights[r] * s;
            }
            loss /= denom;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::Mse {
                x,
                target: target.clone(),
                row_weights: weights,
                denom,
            },
            rg,
        ))
    }

    /// Quantize-dequantize with a straight-through gradient.
    pub fn fake_quant(&mut self, x: Var, q: &QuantParams) -> Result<Var> {
        let xv = self.value(x);
        if q.scales.len() != 1 && q.scales.len() != xv.rows() {
            return Err(Error::shape(format!(
                "{} scales for {} rows",
                q.scales.len(),
                xv.rows()
            )));
        }
        let qmax = q.qmax() as f64;
        let mut out = xv.clone();
        let mut gate = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let s: T = lit(q.scale_for_row(r) as f64);
            let limit = lit::<T>(qmax) * s;
            for v in out.row_mut(r) {
                gate.push(v.abs() <= limit);
                let n = (*v / s).to_f64().expect("finite").round_ties_even().clamp(-qmax, qmax);
                *v = lit::<T>(n) * s;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::FakeQuant(x, gate), rg))
    }

    /// Elementwise product with a keep mask; pruned positions get exactly
    /// zero value and zero gradient.
    pub fn mask_mul(&mut self, x: Var, mask: &SparsityMask) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != (mask.rows(), mask.cols()) {
            return Err(Error::shape("mask shape"));
        }
        let keep = mask.bits().to_vec();
        let out = Matrix::from_raw(
            xv.rows(),
            xv.cols(),
            xv.data()
                .iter()
                .zip(&keep)
                .map(|(&v, &k)| if k { v } else { T::zero() })
                .collect(),
        );
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskMul(x, keep), rg))
    }

    /// Reverse pass from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Graph(format!(
                "loss must be 1x1, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    let da = gemm_unchecked(g, &self.value(*b).transpose());
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let db = gemm_tn_unchecked(self.value(*a), g);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear(x, w) => {
                if rg(*x) {
                    let dx = gemm_unchecked(g, self.value(*w));
                    self.accumulate(grads, *x, dx);
                }
                if rg(*w) {
                    let dw = gemm_tn_unchecked(g, self.value(*x));
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if rg(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let da = g.zip_map(self.value(*b), |x, y| x * y).expect("shapes");
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let db = g.zip_map(self.value(*a), |x, y| x * y).expect("shapes");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Gelu(a, slope) => {
                let da = Matrix::from_raw(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(slope).map(|(&gv, &d)| gv * d).collect(),
                );
                self.accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut da = g.clone();
                for r in 0..y.rows() {
                    let dot = y
                        .row(r)
                        .iter()
                        .zip(g.row(r))
                        .fold(T::zero(), |s, (&p, &d)| s + p * d);
                    for (o, &p) in da.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o = p * (*o - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = xhat.cols();
                let nf: T = lit(n as f64);
                let gam = self.value(*gamma).data();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = Matrix::zeros(1, n);
                    let mut db = Matrix::zeros(1, n);
                    for r in 0..g.rows() {
                        for j in 0..n {
                            dg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                            db.data_mut()[j] += g.get(r, j);
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if rg(*x) {
                    let mut dx = Matrix::zeros(g.rows(), n);
                    for r in 0..g.rows() {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..n {
                            let d = g.get(r, j) * gam[j];
                            sum_d += d;
                            sum_dx += d * xhat.get(r, j);
                        }
                        let is = inv_std[r] / nf;
                        for j in 0..n {
                            let d = g.get(r, j) * gam[j];
                            dx.set(r, j, is * (nf * d - sum_d - xhat.get(r, j) * sum_dx));
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (rows, d) = g.shape();
                let t = rows / batch;
                let dh = d / heads;
                let scale: T = T::one() / lit::<T>(dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Matrix::zeros(rows, d);
                let mut dk = Matrix::zeros(rows, d);
                let mut dv = Matrix::zeros(rows, d);
                for b in 0..*batch {
                    for h in 0..*heads {
                        let p = &probs[b * heads + h];
                        let go = block(g, b * t, t, h * dh, dh);
                        let qh = block(qv, b * t, t, h * dh, dh);
                        let kh = block(kv, b * t, t, h * dh, dh);
                        let vh = block(vv, b * t, t, h * dh, dh);
                        let dp = gemm_unchecked(&go, &vh.transpose());
                        add_block(&mut dv, &gemm_tn_unchecked(p, &go), b * t, h * dh);
                        let mut ds = dp;
                        for r in 0..t {
                            let dot = p
                                .row(r)
                                .iter()
                                .zip(ds.row(r))
                                .fold(T::zero(), |s, (&a, &c)| s + a * c);
                            for (o, &pv) in ds.row_mut(r).iter_mut().zip(p.row(r)) {
                                *o = pv * (*o - dot) * scale;
                            }
                        }
                        add_block(&mut dq, &gemm_unchecked(&ds, &kh), b * t, h * dh);
                        add_block(&mut dk, &gemm_tn_unchecked(&ds, &qh), b * t, h * dh);
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let d = g.cols();
                let t = g.rows() / batch;
                let n = t - 1;
                let mut dp = Matrix::zeros(batch * n, d);
                let mut dc = Matrix::zeros(1, d);
                let mut dpos = Matrix::zeros(t, d);
                for b in 0..*batch {
                    for j in 0..t {
                        let src = g.row(b * t + j);
                        for (a, &s) in dpos.row_mut(j).iter_mut().zip(src) {
                            *a += s;
                        }
                        let dst = if j == 0 {
                            dc.row_mut(0)
                        } else {
                            dp.row_mut(b * n + j - 1)
                        };
                        for (a, &s) in dst.iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                }
                self.accumulate(grads, *patches, dp);
                self.accumulate(grads, *cls, dc);
                self.accumulate(grads, *pos, dpos);
            }
            Op::SelectRows(x, rows) => {
                let (xr, xc) = self.shape(*x);
                let mut dx = Matrix::zeros(xr, xc);
                for (i, &r) in rows.iter().enumerate() {
                    for (a, &s) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *a += s;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Matrix::from_raw(r, c, g.data().to_vec()));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                let n: T = lit((r * c).max(1) as f64);
                self.accumulate(grads, *x, Matrix::filled(r, c, g.data()[0] / n));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b: T = lit(probs.rows().max(1) as f64);
                let scale = g.data()[0] / b;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = d.get(r, t);
                    d.set(r, t, v - T::one());
                }
                self.accumulate(grads, *logits, d.scale(scale));
            }
            Op::KlDiv {
                student,
                temperature,
                p_student,
                p_teacher,
            } => {
                let b: T = lit(p_student.rows().max(1) as f64);
                let scale = g.data()[0] * *temperature / b;
                let d = p_student
                    .zip_map(p_teacher, |s, t| (s - t) * scale)
                    .expect("shapes");
                self.accumulate(grads, *student, d);
            }
            Op::Mse {
                x,
                target,
                row_weights,
                denom,
            } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                if *denom > T::zero() {
                    let two: T = lit(2.0);
                    let s = g.data()[0] * two / *denom;
                    for r in 0..xv.rows() {
                        let w = row_weights[r];
                        if w == T::zero() {
                            continue;
                        }
                        for ((o, &a), &t) in d.row_mut(r).iter_mut().zip(xv.row(r)).zip(target.row(r)) {
                            *o = s * w * (a - t);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::FakeQuant(x, gate) | Op::MaskMul(x, gate) => {
                let (r, c) = g.shape();
                let d = g
                    .data()
                    .iter()
                    .zip(gate)
                    .map(|(&v, &pass)| if pass { v } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Matrix::from_raw(r, c, d));
            }
        }
    }
}

fn check_step(params: &[&mut Matrix], grads: &[Matrix], masks: &[Option<&SparsityMask>], names: &[&str]) -> Result<()> {
    if params.len() != grads.len() || params.len() != masks.len() {
        return Err(Error::shape("params, grads and masks differ in length"));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::shape(format!("gradient shape for parameter {i}")));
        }
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            let name = names.get(i).copied().unwrap_or("?");
            return Err(Error::Training(format!(
                "non-finite gradient {} in parameter {i} ({name}) at element {pos}",
                g.data()[pos]
            )));
        }
    }
    Ok(())
}

fn masked_grad(keep: Option<&[bool]>, j: usize, g: f32) -> f32 {
    match keep {
        Some(k) if !k[j] => 0.0,
        _ => g,
    }
}

/// A first-order optimizer over a fixed parameter list.
///
/// `masks[i]`, when present, pins the pruned entries of `params[i]` at
/// zero: their gradients are dropped before the update and the entries
/// are reset afterwards, so masks survive any number of steps. `names` is
/// used only in diagnostics.
pub trait Optimizer {
    fn lr(&self) -> f32;
    fn set_lr(&mut self, lr: f32);
    fn step(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[Matrix],
        masks: &[Option<&SparsityMask>],
        names: &[&str],
    ) -> Result<()>;
}

/// Classical momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// See [`Optimizer::step`].
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[Matrix],
        masks: &[Option<&SparsityMask>],
        names: &[&str],
    ) -> Result<()> {
        check_step(params, grads, masks, names)?;
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        }
        for (i, p) in params.iter_mut().enumerate() {
            let vel = &mut self.velocity[i];
            let keep = masks[i].map(|m| m.bits());
            for (j, (v, &g)) in vel.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                *v = self.momentum * *v + masked_grad(keep, j, g);
            }
            for (w, &v) in p.data_mut().iter_mut().zip(vel.data()) {
                *w -= self.lr * v;
            }
            if let Some(m) = masks[i] {
                zero_dropped(p, m);
            }
        }
        Ok(())
    }
}

impl Optimizer for Sgd {
    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn step(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[Matrix],
        masks: &[Option<&SparsityMask>],
        names: &[&str],
    ) -> Result<()> {
        Sgd::step(self, params, grads, masks, names)
    }
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn step(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[Matrix],
        masks: &[Option<&SparsityMask>],
        names: &[&str],
    ) -> Result<()> {
        check_step(params, grads, masks, names)?;
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.iter_mut().enumerate() {
            let keep = masks[i].map(|m| m.bits());
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, ((w, &g), (mj, vj))) in p
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .enumerate()
            {
                let g = masked_grad(keep, j, g);
                *mj = b1 * *mj + (1.0 - b1) * g;
                *vj = b2 * *vj + (1.0 - b2) * g * g;
                *w -= self.lr * (*mj / c1) / ((*vj / c2).sqrt() + self.eps);
            }
            if let Some(mask) = masks[i] {
                zero_dropped(p, mask);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dense_gemm, random_matrix, Dist, Rng};
    use crate::sparsity::select_mask_2of4;

    #[test]
    fn matmul_node_is_dense_gemm() {
        let mut rng = Rng::new(2);
        let a = random_matrix(&mut rng, 3, 4, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
        let b = random_matrix(&mut rng, 4, 5, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.value(c), &dense_gemm(&a, &b).unwrap());
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut rng = Rng::new(3);
        let a = random_matrix(&mut rng, 5, 7, Dist::Normal { mu: 0.0, sigma: 3.0 }).unwrap();
        let mut tape = Tape::new();
        let va = tape.constant(a);
        let s = tape.softmax(va);
        for r in 0..5 {
            let sum: f32 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_at_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Matrix::zeros(1, 1));
        let y = tape.gelu(x);
        assert_eq!(tape.scalar(y), 0.0);
    }

    #[test]
    fn mse_gradient_vanishes_at_target() {
        let c = Matrix::from_rows(&[[1.0f32, -2.0, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(c.clone());
        let l = tape.mse(x, &c, None).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn pruned_positions_get_zero_gradient() {
        let mut rng = Rng::new(5);
        let w = random_matrix(&mut rng, 4, 8, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
        let x = random_matrix(&mut rng, 3, 8, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
        let mask = select_mask_2of4(&w).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(w);
        let xv = tape.constant(x);
        let wm = tape.mask_mul(wv, &mask).unwrap();
        let y = tape.linear(xv, wm).unwrap();
        let l = tape.mean(y);
        let g = tape.backward(l).unwrap();
        for (gv, &k) in g.get(wv).unwrap().data().iter().zip(mask.bits()) {
            if !k {
                assert_eq!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn sgd_hand_step() {
        let mut p = Matrix::filled(1, 1, 1.0f32);
        // gradient of ½‖x‖² is x
        let g = p.clone();
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(&mut [&mut p], &[g], &[None], &["x"]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);

        let mut q = Matrix::filled(2, 2, 3.0f32);
        let before = q.clone();
        Sgd::new(0.0, 0.9)
            .step(&mut [&mut q], &[Matrix::filled(2, 2, 5.0)], &[None], &["q"])
            .unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn sgd_rejects_nan() {
        let mut p = Matrix::zeros(1, 2);
        let g = Matrix::from_raw(1, 2, vec![0.0, f32::NAN]);
        let err = Sgd::new(0.1, 0.9).step(&mut [&mut p], &[g], &[None], &["w"]).unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains("(w)")));
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        // with bias correction the first step is lr·g/(|g|+ε)
        let mut p = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let g = Matrix::from_vec(1, 3, vec![4.0, -0.1, 0.0]).unwrap();
        let mut opt = Adam::new(0.01);
        Optimizer::step(&mut opt, &mut [&mut p], &[g], &[None], &["w"]).unwrap();
        let want = [0.99, -1.99, 0.5];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_keeps_masks_and_minimizes() {
        let mut rng = Rng::new(9);
        let mut w = random_matrix(&mut rng, 4, 8, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
        let mask = select_mask_2of4(&w).unwrap();
        zero_dropped(&mut w, &mask);
        let mut opt = Adam::new(0.05);
        for _ in 0..300 {
            // loss ½‖w − 3‖² has gradient w − 3 everywhere
            let g = w.map(|v| v - 3.0);
            Optimizer::step(&mut opt, &mut [&mut w], &[g], &[Some(&mask)], &["w"]).unwrap();
        }
        for (j, (&v, &k)) in w.data().iter().zip(mask.bits()).enumerate() {
            if k {
                assert!((v - 3.0).abs() < 0.05, "kept {j}: {v}");
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn sgd_keeps_masks() {
        let mut rng = Rng::new(1);
        let mut w = random_matrix(&mut rng, 4, 8, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
        let mask = select_mask_2of4(&w).unwrap();
        zero_dropped(&mut w, &mask);
        let mut opt = Sgd::new(0.05, 0.9);
        for _ in 0..20 {
            let g = random_matrix(&mut rng, 4, 8, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
            opt.step(&mut [&mut w], &[g], &[Some(&mask)], &["w"]).unwrap();
        }
        for (v, &k) in w.data().iter().zip(mask.bits()) {
            if !k {
                assert_eq!(*v, 0.0);
            }
        }
    }

    fn normal64(rng: &mut Rng, r: usize, c: usize, sigma: f32) -> Matrix<f64> {
        random_matrix(rng, r, c, Dist::Normal { mu: 0.0, sigma }).unwrap().cast()
    }

    /// Small transformer-shaped graph touching every differentiable op.
    fn toy_loss(tape: &mut Tape<f64>, params: &[Matrix<f64>], consts: &[Matrix<f64>], mask: &SparsityMask) -> Var {
        let p: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
        let (patches, teacher, target) = (tape.constant(consts[0].clone()), &consts[1], &consts[2]);
        let we = tape.mask_mul(p[0], mask).unwrap();
        let e = tape.linear(patches, we).unwrap();
        let e = tape.add_row(e, p[1]).unwrap();
        let tokens = tape.assemble_tokens(e, p[2], p[3], 2).unwrap();
        let ln = tape.layer_norm(tokens, p[4], p[5]).unwrap();
        let q = tape.linear(ln, p[6]).unwrap();
        let k = tape.linear(ln, p[7]).unwrap();
        let v = tape.matmul(ln, p[8]).unwrap();
        let att = tape.attention(q, k, v, 2, 2).unwrap();
        let h = tape.add(tokens, att).unwrap();
        let f = tape.linear(h, p[9]).unwrap();
        let f = tape.gelu(f);
        let f = tape.mul(f, h).unwrap();
        let f = tape.scale(f, 0.7);
        let cls = tape.select_rows(f, vec![0, 4]).unwrap();
        let logits = tape.linear(cls, p[10]).unwrap();
        let ce = tape.cross_entropy(logits, vec![1, 2]).unwrap();
        let kl = tape.kl_div(logits, teacher, 2.0).unwrap();
        let flat = tape.reshape(f, 4, 8).unwrap();
        let mse = tape.mse(flat, target, Some(&[1.0, 0.0, 1.0, 1.0])).unwrap();
        let sm = tape.softmax(logits);
        let sq = tape.mul(sm, sm).unwrap();
        let spread = tape.mean(sq);
        let total = tape.add(ce, kl).unwrap();
        let total = tape.add(total, mse).unwrap();
        tape.add(total, spread).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = Rng::new(11);
        let shapes = [
            (4, 4), (1, 4), (1, 4), (4, 4), (1, 4), (1, 4),
            (4, 4), (4, 4), (4, 4), (4, 4), (3, 4),
        ];
        let mut params: Vec<Matrix<f64>> =
            shapes.iter().map(|&(r, c)| normal64(&mut rng, r, c, 0.6)).collect();
        // layer norm gain near 1 keeps the problem well conditioned
        params[4] = params[4].map(|v| 1.0 + 0.2 * v);
        let consts = vec![
            normal64(&mut rng, 6, 4, 1.0),
            normal64(&mut rng, 2, 3, 1.5),
            normal64(&mut rng, 4, 8, 0.5),
        ];
        let mask = select_mask_2of4(&params[0].cast::<f32>()).unwrap();

        let mut tape = Tape::new();
        let loss = toy_loss(&mut tape, &params, &consts, &mask);
        let grads = tape.backward(loss).unwrap();

        let eps = 1e-3;
        let mut worst = 0.0f64;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.get(Var(pi)).expect("param gradient");
            for j in 0..p.len() {
                let eval = |delta: f64| {
                    let mut ps = params.clone();
                    ps[pi].data_mut()[j] += delta;
                    let mut t = Tape::new();
                    let l = toy_loss(&mut t, &ps, &consts, &mask);
                    t.scalar(l)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "param {pi} elem {j}: analytic {a} numeric {numeric}");
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn f32_gradients_roughly_match() {
        // f32 differences are noisy; this only guards against gross errors
        let mut rng = Rng::new(4);
        let w = random_matrix(&mut rng, 3, 5, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
        let x = random_matrix(&mut rng, 4, 5, Dist::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
        let f = |w: &Matrix| {
            let mut t = Tape::new();
            let (wv, xv) = (t.param(w.clone()), t.constant(x.clone()));
            let y = t.linear(xv, wv).unwrap();
            let y = t.gelu(y);
            let l = t.cross_entropy(y, vec![0, 1, 2, 0]).unwrap();
            (t.scalar(l), t.backward(l).unwrap().take(wv).unwrap())
        };
        let (_, g) = f(&w);
        let eps = 1e-2;
        for j in 0..w.len() {
            let mut a = w.clone();
            a.data_mut()[j] += eps;
            let mut b = w.clone();
            b.data_mut()[j] -= eps;
            let num = (f(&a).0 - f(&b).0) / (2.0 * eps);
            assert!((num - g.data()[j]).abs() < 2e-2 * g.data()[j].abs().max(0.1));
        }
    }

    #[test]
    fn fake_quant_is_straight_through_inside_range() {
        let q = QuantParams::per_tensor(crate::quant::BitWidth::Int8, 0.01).unwrap();
        let x = Matrix::from_rows(&[[0.5f32, -1.2, 1.3, -2.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = tape.fake_quant(xv, &q).unwrap();
        assert_eq!(tape.value(y), &crate::quant::fake_quant(&x, &q).unwrap());
        let l = tape.mean(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn loss_decreases_on_separable_task() {
        // Two Gaussian clouds, logistic regression via a 1-layer linear map.
        let mut rng = Rng::new(42);
        let n = 64;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { -1.5 } else { 1.5 };
            xs.push(center + rng.normal(0.0, 0.5));
            xs.push(rng.normal(0.0, 0.5));
            ys.push(c);
        }
        let x = Matrix::from_vec(n, 2, xs).unwrap();
        let mut w = Matrix::zeros(2, 2);
        let mut opt = Sgd::new(0.5, 0.0);
        let mut last = f32::INFINITY;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let wv = tape.param(w.clone());
            let xv = tape.constant(x.clone());
            let logits = tape.linear(xv, wv).unwrap();
            let l = tape.cross_entropy(logits, ys.clone()).unwrap();
            let loss = tape.scalar(l);
            assert!(loss < last, "loss {loss} did not drop below {last}");
            last = loss;
            let mut g = tape.backward(l).unwrap();
            opt.step(&mut [&mut w], &[g.take(wv).unwrap()], &[None], &["w"]).unwrap();
        }
    }
}
