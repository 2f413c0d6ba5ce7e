use super::{Block, ModelParams, LN_EPS};
use crate::error::{Error, Result};
use crate::kernel::{
    attend_dense_backward, attend_dense_cached, attend_sparse_backward, attend_sparse_cached,
    DenseCache, KernelMacs, SparseCache,
};
use crate::pattern::{build_mask, PatternSpec};
use crate::tensor::Matrix;

/// Which attention kernel the forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelChoice {
    #[default]
    Sparse,
    /// Dense scores with the materialised mask; the reference path.
    DenseMasked,
}

enum AttnCache {
    Sparse(SparseCache),
    Dense(DenseCache),
}

struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

struct BlockCache {
    pattern: PatternSpec,
    attn: AttnCache,
    ln1: LayerNormCache,
    y: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
    ln2: LayerNormCache,
    out: Matrix,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    input: Matrix,
    in_ln: LayerNormCache,
    in_normed: Matrix,
    x0: Matrix,
    blocks: Vec<BlockCache>,
    output: Matrix,
}

impl ForwardCache {
    /// Predicted mask, `L × K`.
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Hidden state after the input projection (before any block).
    pub fn embedding(&self) -> &Matrix {
        &self.x0
    }

    /// Hidden state after block `b` (0-based).
    pub fn block_output(&self, b: usize) -> &Matrix {
        &self.blocks[b].out
    }

    /// Patterns used by each block, in order.
    pub fn block_patterns(&self) -> Vec<PatternSpec> {
        self.blocks.iter().map(|b| b.pattern).collect()
    }

    /// Score/context MACs spent by the attention kernels of all blocks.
    pub fn attention_macs(&self) -> KernelMacs {
        let mut total = KernelMacs::default();
        for b in &self.blocks {
            let m = match &b.attn {
                AttnCache::Sparse(c) => c.macs(),
                AttnCache::Dense(c) => c.macs(),
            };
            total.scores += m.scores;
            total.context += m.context;
        }
        total
    }
}

fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LayerNormCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut y = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / cols as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (h, v) in xh.iter_mut().zip(r) {
            *h = (v - mean) * is;
        }
        for (((o, h), g), b) in y.row_mut(i).iter_mut().zip(xhat.row(i)).zip(gain).zip(bias) {
            *o = g * h + b;
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `∂L/∂x` and accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: &Matrix,
    cache: &LayerNormCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix {
    let (rows, cols) = dy.shape();
    let mut dx = Matrix::zeros(rows, cols);
    let mut dxhat = vec![0.0; cols];
    for i in 0..rows {
        let (g, xh) = (dy.row(i), cache.xhat.row(i));
        for c in 0..cols {
            dgain[c] += g[c] * xh[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
        let is = cache.inv_std[i];
        for ((o, &d), &h) in dx.row_mut(i).iter_mut().zip(&dxhat).zip(xh) {
            *o = is * (d - mean_d - h * mean_dx);
        }
    }
    dx
}

fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in y.as_mut_slice() {
        *v = v.max(0.0);
    }
    y
}

/// Zeroes `grad` where the ReLU input was not positive.
fn relu_backward(grad: &mut Matrix, pre: &Matrix) {
    for (g, &p) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut y = x.matmul(w);
    y.add_row_vector(b);
    y
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_input(params: &ModelParams, magnitude: &Matrix) -> Result<()> {
    if magnitude.cols() != params.config.bins {
        return Err(Error::ShapeMismatch(format!(
            "input has {} bins, model expects {}",
            magnitude.cols(),
            params.config.bins
        )));
    }
    if magnitude.rows() == 0 {
        return Err(Error::InvalidConfig(
            "input must have at least one frame".into(),
        ));
    }
    if !magnitude.is_finite() {
        return Err(Error::NonFinite("model input"));
    }
    Ok(())
}

fn block_forward(
    block: &Block,
    x: &Matrix,
    pattern: PatternSpec,
    kernel: KernelChoice,
) -> Result<BlockCache> {
    let (a, attn) = match kernel {
        KernelChoice::Sparse => {
            let (a, c) = attend_sparse_cached(x, x, x, &block.attn, &pattern)?;
            (a, AttnCache::Sparse(c))
        }
        KernelChoice::DenseMasked => {
            let mask = build_mask(&pattern, x.rows())?;
            let (a, c) = attend_dense_cached(x, x, x, &block.attn, Some(&mask))?;
            (a, AttnCache::Dense(c))
        }
    };
    let mut r1 = x.clone();
    r1.add_assign(&a);
    let (y, ln1) = layer_norm(&r1, &block.ln1_gain, &block.ln1_bias);
    let ff_pre = affine(&y, &block.ff_w1, &block.ff_b1);
    let ff_act = relu(&ff_pre);
    let mut r2 = affine(&ff_act, &block.ff_w2, &block.ff_b2);
    r2.add_assign(&y);
    let (out, ln2) = layer_norm(&r2, &block.ln2_gain, &block.ln2_bias);
    Ok(BlockCache {
        pattern,
        attn,
        ln1,
        y,
        ff_pre,
        ff_act,
        ln2,
        out,
    })
}

/// Predicts an `L × K` mask in `(0, 1)` from an `L × K` magnitude spectrum
/// using the sparse kernel.
pub fn forward(params: &ModelParams, magnitude: &Matrix) -> Result<ForwardCache> {
    forward_with(params, magnitude, KernelChoice::Sparse)
}

pub fn forward_with(
    params: &ModelParams,
    magnitude: &Matrix,
    kernel: KernelChoice,
) -> Result<ForwardCache> {
    check_input(params, magnitude)?;
    let pre = affine(magnitude, &params.in_w, &params.in_b);
    let (in_normed, in_ln) = layer_norm(&pre, &params.in_ln_gain, &params.in_ln_bias);
    let x0 = relu(&in_normed);
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (block, pattern) in params.blocks.iter().zip(params.config.schedule()) {
        let x = blocks.last().map_or(&x0, |b: &BlockCache| &b.out);
        let c = block_forward(block, x, pattern, kernel)?;
        blocks.push(c);
    }
    let last = blocks.last().map_or(&x0, |b| &b.out);
    let mut output = affine(last, &params.out_w, &params.out_b);
    for v in output.as_mut_slice() {
        *v = sigmoid(*v);
    }
    Ok(ForwardCache {
        input: magnitude.clone(),
        in_ln,
        in_normed,
        x0,
        blocks,
        output,
    })
}

/// Mean squared error over all `L·K` entries.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.as_slice().len() as f64;
    Ok(pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

pub struct Backward {
    pub loss: f64,
    pub grads: ModelParams,
    /// `∂loss/∂input`.
    pub input_grad: Matrix,
}

/// Exact gradients of the MSE between the cached prediction and `target`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, target: &Matrix) -> Result<Backward> {
    let loss = mse_loss(&cache.output, target)?;
    let mut grads = params.zeros_like();
    let n = cache.output.as_slice().len() as f64;

    // sigmoid head
    let (rows, bins) = cache.output.shape();
    let mut dz = Matrix::zeros(rows, bins);
    for ((d, &p), &t) in dz
        .as_mut_slice()
        .iter_mut()
        .zip(cache.output.as_slice())
        .zip(target.as_slice())
    {
        *d = 2.0 * (p - t) / n * p * (1.0 - p);
    }
    let last = cache.blocks.last().map_or(&cache.x0, |b| &b.out);
    grads.out_w = last.t_matmul(&dz);
    grads.out_b = dz.column_sums();
    let mut dx = dz.matmul_t(&params.out_w);

    for ((block, bc), g) in params
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        // out = LN2(y + FFN(y))
        let dr2 = layer_norm_backward(
            &dx,
            &bc.ln2,
            &block.ln2_gain,
            &mut g.ln2_gain,
            &mut g.ln2_bias,
        );
        g.ff_w2 = bc.ff_act.t_matmul(&dr2);
        g.ff_b2 = dr2.column_sums();
        let mut dpre = dr2.matmul_t(&block.ff_w2);
        relu_backward(&mut dpre, &bc.ff_pre);
        g.ff_w1 = bc.y.t_matmul(&dpre);
        g.ff_b1 = dpre.column_sums();
        let mut dy = dpre.matmul_t(&block.ff_w1);
        dy.add_assign(&dr2);

        // y = LN1(x + MHA(x, x, x))
        let dr1 = layer_norm_backward(
            &dy,
            &bc.ln1,
            &block.ln1_gain,
            &mut g.ln1_gain,
            &mut g.ln1_bias,
        );
        let ag = match &bc.attn {
            AttnCache::Sparse(c) => attend_sparse_backward(c, &block.attn, &dr1)?,
            AttnCache::Dense(c) => attend_dense_backward(c, &block.attn, &dr1)?,
        };
        g.attn.wq = ag.wq;
        g.attn.wk = ag.wk;
        g.attn.wv = ag.wv;
        g.attn.wo = ag.wo;
        dx = dr1;
        dx.add_assign(&ag.dq);
        dx.add_assign(&ag.dk);
        dx.add_assign(&ag.dv);
    }

    // x0 = ReLU(LN(X·W + b))
    relu_backward(&mut dx, &cache.in_normed);
    let dpre = layer_norm_backward(
        &dx,
        &cache.in_ln,
        &params.in_ln_gain,
        &mut grads.in_ln_gain,
        &mut grads.in_ln_bias,
    );
    grads.in_w = cache.input.t_matmul(&dpre);
    grads.in_b = dpre.column_sums();
    let input_grad = dpre.matmul_t(&params.in_w);
    Ok(Backward {
        loss,
        grads,
        input_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(pattern: PatternSpec) -> ModelConfig {
        ModelConfig {
            blocks: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            bins: 5,
            pattern,
        }
    }

    fn input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(0.0..2.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_is_a_mask_of_input_shape() {
        let p = ModelParams::init(cfg(PatternSpec::Ripple { w: 2, d: 2 }), 1).unwrap();
        let x = input(11, 5, 2);
        let out = forward(&p, &x).unwrap();
        assert_eq!(out.output().shape(), (11, 5));
        assert!(out.output().as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn single_frame_runs_for_every_pattern() {
        for pattern in [
            PatternSpec::Full,
            PatternSpec::Band { w: 4 },
            PatternSpec::Ripple { w: 4, d: 3 },
            PatternSpec::Blockwise { block: 3 },
        ] {
            let p = ModelParams::init(cfg(pattern), 1).unwrap();
            let out = forward(&p, &input(1, 5, 3)).unwrap();
            assert_eq!(out.output().shape(), (1, 5));
        }
    }

    #[test]
    fn sparse_and_dense_kernels_agree() {
        let p = ModelParams::init(cfg(PatternSpec::Ripple { w: 2, d: 3 }), 4).unwrap();
        let x = input(23, 5, 5);
        let a = forward_with(&p, &x, KernelChoice::Sparse).unwrap();
        let b = forward_with(&p, &x, KernelChoice::DenseMasked).unwrap();
        assert!(a.output().max_abs_diff(b.output()) < 1e-9);
        let t = input(23, 5, 6);
        let mut t = t;
        for v in t.as_mut_slice() {
            *v /= 2.0;
        }
        let ga = backward(&p, &a, &t).unwrap();
        let gb = backward(&p, &b, &t).unwrap();
        for ((_, x), (_, y)) in ga.grads.tensors().iter().zip(gb.grads.tensors()) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = input(6, 16, 7);
        let (_, c) = layer_norm(&x, &[1.0; 16], &[0.0; 16]);
        for i in 0..6 {
            let r = c.xhat.row(i);
            let mean = r.iter().sum::<f64>() / 16.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            // epsilon inside the root shrinks the variance slightly
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let p = ModelParams::init(cfg(PatternSpec::Band { w: 2 }), 8).unwrap();
        let x = input(9, 5, 9);
        let c = forward(&p, &x).unwrap();
        let b = backward(&p, &c, &c.output().clone()).unwrap();
        assert_eq!(b.loss, 0.0);
        for (_, t) in b.grads.tensors() {
            assert!(t.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn doubling_residuals_quadruples_loss() {
        let p = ModelParams::init(cfg(PatternSpec::Full), 10).unwrap();
        let c = forward(&p, &input(4, 5, 11)).unwrap();
        let pred = c.output();
        let t1 = Matrix::from_vec(4, 5, pred.as_slice().iter().map(|v| v - 0.1).collect()).unwrap();
        let t2 = Matrix::from_vec(4, 5, pred.as_slice().iter().map(|v| v - 0.2).collect()).unwrap();
        let (l1, l2) = (mse_loss(pred, &t1).unwrap(), mse_loss(pred, &t2).unwrap());
        assert!((l2 / l1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_input() {
        let p = ModelParams::init(cfg(PatternSpec::Full), 1).unwrap();
        assert!(forward(&p, &input(3, 4, 1)).is_err());
        let mut x = input(3, 5, 1);
        x.set(1, 1, f64::INFINITY);
        assert!(matches!(forward(&p, &x), Err(Error::NonFinite(_))));
        let c = forward(&p, &input(3, 5, 1)).unwrap();
        assert!(backward(&p, &c, &Matrix::zeros(2, 5)).is_err());
    }
}
