//! Masked multi-head scaled dot-product attention.
//!
//! Two implementations of the same map live here:
//!
//! * [`attend_dense`] builds the full `L × L` score matrix per head, writes
//!   `−∞` into masked positions and runs an ordinary row softmax. It is the
//!   reference used to check everything else.
//! * [`attend_sparse`] walks only the admissible `(i, j)` pairs of a
//!   [`PatternSpec`], packed row by row, and never materialises `−∞`.
//!
//! Projection weights for head `h` are the column block
//! `[h·d_k, (h+1)·d_k)` of the corresponding `d_model × d_model` matrix. No
//! bias terms are used in the Q/K/V/O projections.
//!
//! Reductions always run in ascending column order so both kernels, and
//! their backward passes, agree to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pattern::{BoolMask, PatternSpec};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    heads: usize,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl MhaParams {
    pub fn new(heads: usize, wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix) -> Result<Self> {
        let d = wq.rows();
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "{heads} heads do not divide d_model = {d}"
            )));
        }
        for (name, m) in [("wq", &wq), ("wk", &wk), ("wv", &wv), ("wo", &wo)] {
            if m.shape() != (d, d) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {:?}, expected ({d}, {d})",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("attention weights"));
            }
        }
        Ok(Self {
            heads,
            wq,
            wk,
            wv,
            wo,
        })
    }

    /// Glorot-uniform weights, `±sqrt(6 / (fan_in + fan_out))`.
    pub fn random<R: Rng + ?Sized>(heads: usize, d_model: usize, rng: &mut R) -> Result<Self> {
        let mut m = || glorot(d_model, d_model, rng);
        let (wq, wk, wv, wo) = (m(), m(), m(), m());
        Self::new(heads, wq, wk, wv, wo)
    }

    /// [`random`](Self::random) drawn from a ChaCha8 stream seeded with `seed`.
    pub fn seeded(heads: usize, d_model: usize, seed: u64) -> Result<Self> {
        Self::random(heads, d_model, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.heads
    }
}

pub(crate) fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Gradients of one attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

impl MhaGrads {
    pub fn max_abs_diff(&self, other: &MhaGrads) -> f64 {
        [
            self.wq.max_abs_diff(&other.wq),
            self.wk.max_abs_diff(&other.wk),
            self.wv.max_abs_diff(&other.wv),
            self.wo.max_abs_diff(&other.wo),
            self.dq.max_abs_diff(&other.dq),
            self.dk.max_abs_diff(&other.dk),
            self.dv.max_abs_diff(&other.dv),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Multiply-accumulate counts of the score (`Q·Kᵀ`) and context (`A·V`)
/// passes of one call, summed over heads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelMacs {
    pub scores: u64,
    pub context: u64,
}

struct Projected {
    q_in: Matrix,
    k_in: Matrix,
    v_in: Matrix,
    qp: Matrix,
    kp: Matrix,
    vp: Matrix,
}

fn project(q: &Matrix, k: &Matrix, v: &Matrix, p: &MhaParams) -> Result<Projected> {
    let d = p.d_model();
    let len = q.rows();
    for (name, m) in [("Q", q), ("K", k), ("V", v)] {
        if m.shape() != (len, d) {
            return Err(Error::ShapeMismatch(format!(
                "{name} is {:?}, expected ({len}, {d})",
                m.shape()
            )));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite("attention input"));
        }
    }
    if len == 0 {
        return Err(Error::InvalidConfig("sequence length must be >= 1".into()));
    }
    Ok(Projected {
        qp: q.matmul(&p.wq),
        kp: k.matmul(&p.wk),
        vp: v.matmul(&p.wv),
        q_in: q.clone(),
        k_in: k.clone(),
        v_in: v.clone(),
    })
}

/// Activations kept by the dense kernel for its backward pass.
pub struct DenseCache {
    proj: Projected,
    /// One `L × L` post-softmax matrix per head.
    weights: Vec<Matrix>,
    context: Matrix,
    macs: KernelMacs,
}

impl DenseCache {
    pub fn weights(&self, head: usize) -> &Matrix {
        &self.weights[head]
    }

    pub fn macs(&self) -> KernelMacs {
        self.macs
    }
}

/// Activations kept by the sparse kernel: CSR row pointers and column
/// indices of the pattern, and packed weights `[head][entry]`.
pub struct SparseCache {
    proj: Projected,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    context: Matrix,
    macs: KernelMacs,
}

impl SparseCache {
    pub fn macs(&self) -> KernelMacs {
        self.macs
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Columns and post-softmax weights of row `i` for one head.
    pub fn row_weights(&self, head: usize, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        let base = head * self.cols.len();
        (&self.cols[a..b], &self.weights[base + a..base + b])
    }
}

/// Dense reference: `softmax((Q_h K_hᵀ/√d_k) ⊙ M) V_h` per head, heads
/// concatenated and projected by `W_o`.
pub fn attend_dense(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    params: &MhaParams,
    mask: &BoolMask,
) -> Result<Matrix> {
    Ok(attend_dense_cached(q, k, v, params, Some(mask))?.0)
}

/// Dense attention with no mask logic at all (every score kept).
pub fn attend_dense_unmasked(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    params: &MhaParams,
) -> Result<Matrix> {
    Ok(attend_dense_cached(q, k, v, params, None)?.0)
}

pub fn attend_dense_cached(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    params: &MhaParams,
    mask: Option<&BoolMask>,
) -> Result<(Matrix, DenseCache)> {
    let proj = project(q, k, v, params)?;
    let len = q.rows();
    if let Some(m) = mask {
        if m.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "mask is {0}x{0}, sequence has {len} frames",
                m.len()
            )));
        }
        if let Some(i) = (0..len).find(|&i| !m.row(i).iter().any(|&b| b)) {
            return Err(Error::EmptyMaskRow(i));
        }
    }
    let dk = params.d_head();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut context = Matrix::zeros(len, params.d_model());
    let mut weights = Vec::with_capacity(params.heads());
    for h in 0..params.heads() {
        let span = h * dk..(h + 1) * dk;
        let mut p = Matrix::zeros(len, len);
        for i in 0..len {
            let qi = &proj.qp.row(i)[span.clone()];
            let row = p.row_mut(i);
            for (j, pij) in row.iter_mut().enumerate() {
                *pij = dot(qi, &proj.kp.row(j)[span.clone()]) * scale;
            }
            if let Some(m) = mask {
                for (pij, &keep) in row.iter_mut().zip(m.row(i)) {
                    if !keep {
                        *pij = f64::NEG_INFINITY;
                    }
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for pij in row.iter_mut() {
                *pij = (*pij - max).exp();
                sum += *pij;
            }
            for pij in row.iter_mut() {
                *pij /= sum;
            }
            let ctx = &mut context.row_mut(i)[span.clone()];
            for (j, &a) in row.iter().enumerate() {
                for (c, &vj) in ctx.iter_mut().zip(&proj.vp.row(j)[span.clone()]) {
                    *c += a * vj;
                }
            }
        }
        weights.push(p);
    }
    let out = context.matmul(&params.wo);
    let full = (len * len * params.d_model()) as u64;
    let cache = DenseCache {
        proj,
        weights,
        context,
        macs: KernelMacs {
            scores: full,
            context: full,
        },
    };
    Ok((out, cache))
}

/// Structured sparse attention over the pairs admitted by `spec`. Equal to
/// [`attend_dense`] with `build_mask(spec, L)` up to rounding.
pub fn attend_sparse(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    params: &MhaParams,
    spec: &PatternSpec,
) -> Result<Matrix> {
    Ok(attend_sparse_cached(q, k, v, params, spec)?.0)
}

pub fn attend_sparse_cached(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    params: &MhaParams,
    spec: &PatternSpec,
) -> Result<(Matrix, SparseCache)> {
    spec.validate()?;
    let proj = project(q, k, v, params)?;
    let len = q.rows();

    let mut row_ptr = Vec::with_capacity(len + 1);
    let mut cols = Vec::new();
    row_ptr.push(0);
    for i in 0..len {
        spec.row_columns(i, len, &mut cols);
        if cols.len() == *row_ptr.last().unwrap() {
            return Err(Error::EmptyMaskRow(i));
        }
        row_ptr.push(cols.len());
    }
    let nnz = cols.len();

    let dk = params.d_head();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut context = Matrix::zeros(len, params.d_model());
    let mut weights = vec![0.0; params.heads() * nnz];
    let mut macs = KernelMacs::default();
    for h in 0..params.heads() {
        let span = h * dk..(h + 1) * dk;
        let packed = &mut weights[h * nnz..(h + 1) * nnz];
        for i in 0..len {
            let (a, b) = (row_ptr[i], row_ptr[i + 1]);
            let qi = &proj.qp.row(i)[span.clone()];
            let row = &mut packed[a..b];
            let mut max = f64::NEG_INFINITY;
            for (s, &j) in row.iter_mut().zip(&cols[a..b]) {
                *s = dot(qi, &proj.kp.row(j)[span.clone()]) * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
            let ctx = &mut context.row_mut(i)[span.clone()];
            for (&w, &j) in row.iter().zip(&cols[a..b]) {
                for (c, &vj) in ctx.iter_mut().zip(&proj.vp.row(j)[span.clone()]) {
                    *c += w * vj;
                }
            }
            let touched = ((b - a) * dk) as u64;
            macs.scores += touched;
            macs.context += touched;
        }
    }
    let out = context.matmul(&params.wo);
    let cache = SparseCache {
        proj,
        row_ptr,
        cols,
        weights,
        context,
        macs,
    };
    Ok((out, cache))
}

fn check_upstream(grad_out: &Matrix, proj: &Projected) -> Result<()> {
    if grad_out.shape() != proj.qp.shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient is {:?}, output is {:?}",
            grad_out.shape(),
            proj.qp.shape()
        )));
    }
    Ok(())
}

/// Shared tail of both backward passes: from gradients w.r.t. the projected
/// Q/K/V to gradients w.r.t. inputs and projection weights.
fn finish_backward(
    proj: &Projected,
    params: &MhaParams,
    context: &Matrix,
    grad_out: &Matrix,
    dqp: Matrix,
    dkp: Matrix,
    dvp: Matrix,
) -> MhaGrads {
    MhaGrads {
        wq: proj.q_in.t_matmul(&dqp),
        wk: proj.k_in.t_matmul(&dkp),
        wv: proj.v_in.t_matmul(&dvp),
        wo: context.t_matmul(grad_out),
        dq: dqp.matmul_t(&params.wq),
        dk: dkp.matmul_t(&params.wk),
        dv: dvp.matmul_t(&params.wv),
    }
}

/// Exact gradients of the dense kernel given `∂loss/∂output`.
pub fn attend_dense_backward(
    cache: &DenseCache,
    params: &MhaParams,
    grad_out: &Matrix,
) -> Result<MhaGrads> {
    let proj = &cache.proj;
    check_upstream(grad_out, proj)?;
    let len = grad_out.rows();
    let dk = params.d_head();
    let scale = 1.0 / (dk as f64).sqrt();
    let dctx = grad_out.matmul_t(&params.wo);
    let shape = proj.qp.shape();
    let (mut dqp, mut dkp, mut dvp) = (
        Matrix::zeros(shape.0, shape.1),
        Matrix::zeros(shape.0, shape.1),
        Matrix::zeros(shape.0, shape.1),
    );
    let mut g = vec![0.0; len];
    for (h, a) in cache.weights.iter().enumerate() {
        let span = h * dk..(h + 1) * dk;
        for i in 0..len {
            let dci = &dctx.row(i)[span.clone()];
            let ai = a.row(i);
            for j in 0..len {
                g[j] = dot(dci, &proj.vp.row(j)[span.clone()]);
                let dv = &mut dvp.row_mut(j)[span.clone()];
                for (x, &c) in dv.iter_mut().zip(dci) {
                    *x += ai[j] * c;
                }
            }
            let centre: f64 = ai.iter().zip(&g).map(|(a, g)| a * g).sum();
            for j in 0..len {
                let ds = ai[j] * (g[j] - centre) * scale;
                let kj = &proj.kp.row(j)[span.clone()];
                for (x, kv) in dqp.row_mut(i)[span.clone()].iter_mut().zip(kj) {
                    *x += ds * kv;
                }
                let qi = &proj.qp.row(i)[span.clone()];
                for (x, qv) in dkp.row_mut(j)[span.clone()].iter_mut().zip(qi) {
                    *x += ds * qv;
                }
            }
        }
    }
    Ok(finish_backward(
        proj,
        params,
        &cache.context,
        grad_out,
        dqp,
        dkp,
        dvp,
    ))
}

/// Exact gradients of the sparse kernel; touches only admissible pairs.
pub fn attend_sparse_backward(
    cache: &SparseCache,
    params: &MhaParams,
    grad_out: &Matrix,
) -> Result<MhaGrads> {
    let proj = &cache.proj;
    check_upstream(grad_out, proj)?;
    let len = grad_out.rows();
    let dk = params.d_head();
    let scale = 1.0 / (dk as f64).sqrt();
    let nnz = cache.cols.len();
    let dctx = grad_out.matmul_t(&params.wo);
    let shape = proj.qp.shape();
    let (mut dqp, mut dkp, mut dvp) = (
        Matrix::zeros(shape.0, shape.1),
        Matrix::zeros(shape.0, shape.1),
        Matrix::zeros(shape.0, shape.1),
    );
    let mut g = Vec::new();
    for h in 0..params.heads() {
        let span = h * dk..(h + 1) * dk;
        let packed = &cache.weights[h * nnz..(h + 1) * nnz];
        for i in 0..len {
            let (a, b) = (cache.row_ptr[i], cache.row_ptr[i + 1]);
            let cols = &cache.cols[a..b];
            let w = &packed[a..b];
            let dci = &dctx.row(i)[span.clone()];
            g.clear();
            for (&j, &wij) in cols.iter().zip(w) {
                g.push(dot(dci, &proj.vp.row(j)[span.clone()]));
                let dv = &mut dvp.row_mut(j)[span.clone()];
                for (x, &c) in dv.iter_mut().zip(dci) {
                    *x += wij * c;
                }
            }
            let centre: f64 = w.iter().zip(&g).map(|(a, g)| a * g).sum();
            let qi = &proj.qp.row(i)[span.clone()];
            for ((&j, &wij), &gij) in cols.iter().zip(w).zip(&g) {
                let ds = wij * (gij - centre) * scale;
                let kj = &proj.kp.row(j)[span.clone()];
                for (x, kv) in dqp.row_mut(i)[span.clone()].iter_mut().zip(kj) {
                    *x += ds * kv;
                }
                for (x, qv) in dkp.row_mut(j)[span.clone()].iter_mut().zip(qi) {
                    *x += ds * qv;
                }
            }
        }
    }
    Ok(finish_backward(
        proj,
        params,
        &cache.context,
        grad_out,
        dqp,
        dkp,
        dvp,
    ))
}
