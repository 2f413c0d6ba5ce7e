//! Central finite-difference check of [`backward`](super::backward) against
//! the forward map, over every parameter and every input entry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, mse_loss, ModelConfig, ModelParams};
use crate::error::Result;
use crate::pattern::PatternSpec;
use crate::tensor::Matrix;

/// Denominator floor of the relative error, so that gradients that are
/// zero analytically are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Perturbs one analytic gradient entry before comparing. Used as a
    /// negative control for the checker itself.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn loss_of(params: &ModelParams, input: &Matrix, target: &Matrix) -> Result<f64> {
    mse_loss(forward(params, input)?.output(), target)
}

pub fn check_gradients(
    params: &ModelParams,
    input: &Matrix,
    target: &Matrix,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let cache = forward(params, input)?;
    let mut analytic = backward(params, &cache, target)?;
    if opts.corrupt_analytic {
        analytic.grads.out_b[0] += 1e-2;
    }
    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let mut note = |name: &str, idx: usize, a: f64, n: f64| {
        let e = relative_error(a, n);
        report.checked += 1;
        if e > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = e;
            report.worst = (name.to_string(), idx);
        }
    };

    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic
        .grads
        .tensors()
        .into_iter()
        .map(|(_, t)| t.to_vec())
        .collect();
    let mut probe = params.clone();
    for (t, name) in names.iter().enumerate() {
        let len = grads[t].len();
        for idx in 0..len {
            let orig = probe.tensors_mut()[t][idx];
            probe.tensors_mut()[t][idx] = orig + h;
            let plus = loss_of(&probe, input, target)?;
            probe.tensors_mut()[t][idx] = orig - h;
            let minus = loss_of(&probe, input, target)?;
            probe.tensors_mut()[t][idx] = orig;
            note(name, idx, grads[t][idx], (plus - minus) / (2.0 * h));
        }
    }

    let mut x = input.clone();
    for idx in 0..x.as_slice().len() {
        let orig = x.as_slice()[idx];
        x.as_mut_slice()[idx] = orig + h;
        let plus = loss_of(params, &x, target)?;
        x.as_mut_slice()[idx] = orig - h;
        let minus = loss_of(params, &x, target)?;
        x.as_mut_slice()[idx] = orig;
        note(
            "input",
            idx,
            analytic.input_grad.as_slice()[idx],
            (plus - minus) / (2.0 * h),
        );
    }
    Ok(report)
}

/// K = 5, d_model = 8, h = 2, B = 2, d_ff = 16 with a ripple pattern, so the
/// lower block is band-only and the upper block has dilated links.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        bins: 5,
        pattern: PatternSpec::Ripple { w: 2, d: 2 },
    }
}

/// Random params, a 7-frame magnitude input and a target in `[0, 1]`.
pub fn tiny_problem(seed: u64) -> Result<(ModelParams, Matrix, Matrix)> {
    let cfg = tiny_config();
    let mut params = ModelParams::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // non-trivial gains and biases so their gradients are exercised
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, tensor) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with("gain") {
            for g in tensor.iter_mut() {
                *g = rng.random_range(0.5..1.5);
            }
        } else if !name.contains(".w") {
            for b in tensor.iter_mut() {
                *b = rng.random_range(-0.2..0.2);
            }
        }
    }
    let frames = 7;
    let input = Matrix::from_vec(
        frames,
        cfg.bins,
        (0..frames * cfg.bins)
            .map(|_| rng.random_range(0.0..2.0))
            .collect(),
    )?;
    let target = Matrix::from_vec(
        frames,
        cfg.bins,
        (0..frames * cfg.bins)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )?;
    Ok((params, input, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_passes() {
        let (p, x, t) = tiny_problem(1).unwrap();
        let r = check_gradients(&p, &x, &t, GradCheckOptions::default()).unwrap();
        assert_eq!(r.checked, p.num_params() + x.as_slice().len());
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (p, x, t) = tiny_problem(1).unwrap();
        let opts = GradCheckOptions {
            corrupt_analytic: true,
            ..Default::default()
        };
        let r = check_gradients(&p, &x, &t, opts).unwrap();
        assert!(r.max_rel_error > 1e-4);
        assert_eq!(r.worst.0, "out.b");
    }
}
