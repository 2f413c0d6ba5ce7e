use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Inverse-square-root schedule with linear warm-up:
/// `lr(n) = d_model^-0.5 · min(n^-0.5, n · wup^-1.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub d_model: usize,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(d_model: usize, warmup_steps: u64) -> Result<Self> {
        if d_model == 0 || warmup_steps == 0 {
            return Err(Error::InvalidConfig(
                "d_model and warm-up steps must be >= 1".into(),
            ));
        }
        Ok(Self {
            d_model,
            warmup_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        lr_at(self.d_model, self.warmup_steps, step)
    }
}

pub fn lr_at(d_model: usize, warmup_steps: u64, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::ZeroStep);
    }
    let n = step as f64;
    let w = warmup_steps as f64;
    let decay = 1.0 / n.sqrt();
    let warm = n / (w * w.sqrt());
    Ok(decay.min(warm) / (d_model as f64).sqrt())
}

/// Clamps every value into `[-bound, bound]`. NaN is reported as a
/// divergence.
pub fn clip_values(values: &mut [f64], bound: f64) -> Result<()> {
    for v in values.iter_mut() {
        if v.is_nan() {
            return Err(Error::Numerical("NaN gradient".into()));
        }
        *v = v.clamp(-bound, bound);
    }
    Ok(())
}

pub fn clip_gradients(grads: &mut ModelParams, bound: f64) -> Result<()> {
    if bound <= 0.0 || bound.is_nan() {
        return Err(Error::InvalidConfig(format!(
            "clip bound must be positive, got {bound}"
        )));
    }
    for t in grads.tensors_mut() {
        clip_values(t, bound)?;
    }
    Ok(())
}

/// Adam with bias correction. Moments are flat, in canonical tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    /// β1 = 0.9, β2 = 0.98, ε = 1e-9.
    pub fn new(num_params: usize) -> Self {
        Self::with_hyper(num_params, 0.9, 0.98, 1e-9)
    }

    pub fn with_hyper(num_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        if params.num_params() != self.m.len() || grads.num_params() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} moments, params {}, grads {}",
                self.m.len(),
                params.num_params(),
                grads.num_params()
            )));
        }
        let g_all = grads.tensors();
        let mut p_flat: Vec<&mut [f64]> = params.tensors_mut();
        let mut flat = Vec::with_capacity(self.m.len());
        for (_, g) in &g_all {
            flat.extend_from_slice(g);
        }
        let mut offset = 0;
        for p in p_flat.iter_mut() {
            let n = p.len();
            self.update_slice(p, &flat[offset..offset + n], offset, lr);
            offset += n;
        }
        self.step += 1;
        Ok(())
    }

    /// Slice-level update; `offset` locates the slice in the moment buffers.
    fn update_slice(&mut self, p: &mut [f64], g: &[f64], offset: usize, lr: f64) {
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (w, &gi)) in p.iter_mut().zip(g).enumerate() {
            let m = &mut self.m[offset + i];
            let v = &mut self.v[offset + i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
            *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
