//! The enhancement network: a per-frame input projection with layer norm and
//! ReLU, `B` post-norm transformer blocks whose self-attention is restricted
//! by a mask pattern, and a per-frame sigmoid mask head.

mod checkpoint;
pub mod gradcheck;
mod network;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{from_bytes, load, save, to_bytes, CHECKPOINT_VERSION, MAGIC};
pub use network::{
    backward, forward, forward_with, mse_loss, Backward, ForwardCache, KernelChoice,
};

use crate::error::{Error, Result};
use crate::kernel::{glorot, MhaParams};
use crate::pattern::{layer_schedule, PatternSpec};
use crate::tensor::Matrix;

/// Layer-norm epsilon inside the square root.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub bins: usize,
    pub pattern: PatternSpec,
}

impl ModelConfig {
    /// B = 4, H = 8, d_model = 256, d_ff = 1024, 257 bins.
    pub fn wideband(pattern: PatternSpec) -> Self {
        Self {
            blocks: 4,
            heads: 8,
            d_model: 256,
            d_ff: 1024,
            bins: 257,
            pattern,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.blocks == 0 {
            return bad("blocks must be >= 1".into());
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            ));
        }
        if self.bins == 0 || self.d_ff == 0 {
            return bad("bins and d_ff must be >= 1".into());
        }
        self.pattern.validate()
    }

    pub fn schedule(&self) -> Vec<PatternSpec> {
        layer_schedule(self.blocks, &self.pattern)
    }

    pub fn to_text(&self) -> String {
        format!(
            "blocks={}\nheads={}\nd_model={}\nd_ff={}\nbins={}\npattern={}\n",
            self.blocks, self.heads, self.d_model, self.d_ff, self.bins, self.pattern
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got `{line}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("`{k}` is not an integer")))
        };
        let cfg = Self {
            blocks: num("blocks")?,
            heads: num("heads")?,
            d_model: num("d_model")?,
            d_ff: num("d_ff")?,
            bins: num("bins")?,
            pattern: get("pattern")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn: MhaParams,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ff_w1: Matrix,
    pub ff_b1: Vec<f64>,
    pub ff_w2: Matrix,
    pub ff_b2: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

/// Every learned tensor of the network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub in_w: Matrix,
    pub in_b: Vec<f64>,
    pub in_ln_gain: Vec<f64>,
    pub in_ln_bias: Vec<f64>,
    pub blocks: Vec<Block>,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let in_w = glorot(config.bins, d, &mut rng);
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let attn = MhaParams::random(config.heads, d, &mut rng)?;
            let ff_w1 = glorot(d, config.d_ff, &mut rng);
            let ff_w2 = glorot(config.d_ff, d, &mut rng);
            blocks.push(Block {
                attn,
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                ff_w1,
                ff_b1: vec![0.0; config.d_ff],
                ff_w2,
                ff_b2: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
            });
        }
        let out_w = glorot(d, config.bins, &mut rng);
        Ok(Self {
            config,
            in_w,
            in_b: vec![0.0; d],
            in_ln_gain: vec![1.0; d],
            in_ln_bias: vec![0.0; d],
            blocks,
            out_w,
            out_b: vec![0.0; config.bins],
        })
    }

    /// All-zero tensors shaped like `config`'s parameters.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        p
    }

    /// Tensor names and contents in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("in.w".into(), self.in_w.as_slice()),
            ("in.b".into(), &self.in_b),
            ("in.ln.gain".into(), &self.in_ln_gain),
            ("in.ln.bias".into(), &self.in_ln_bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend([
                (format!("block{i}.attn.wq"), b.attn.wq.as_slice()),
                (format!("block{i}.attn.wk"), b.attn.wk.as_slice()),
                (format!("block{i}.attn.wv"), b.attn.wv.as_slice()),
                (format!("block{i}.attn.wo"), b.attn.wo.as_slice()),
                (format!("block{i}.ln1.gain"), &b.ln1_gain[..]),
                (format!("block{i}.ln1.bias"), &b.ln1_bias[..]),
                (format!("block{i}.ff.w1"), b.ff_w1.as_slice()),
                (format!("block{i}.ff.b1"), &b.ff_b1[..]),
                (format!("block{i}.ff.w2"), b.ff_w2.as_slice()),
                (format!("block{i}.ff.b2"), &b.ff_b2[..]),
                (format!("block{i}.ln2.gain"), &b.ln2_gain[..]),
                (format!("block{i}.ln2.bias"), &b.ln2_bias[..]),
            ]);
        }
        out.push(("out.w".into(), self.out_w.as_slice()));
        out.push(("out.b".into(), &self.out_b));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.in_w.as_mut_slice(),
            &mut self.in_b,
            &mut self.in_ln_gain,
            &mut self.in_ln_bias,
        ];
        for b in &mut self.blocks {
            out.extend([
                b.attn.wq.as_mut_slice(),
                b.attn.wk.as_mut_slice(),
                b.attn.wv.as_mut_slice(),
                b.attn.wo.as_mut_slice(),
                &mut b.ln1_gain[..],
                &mut b.ln1_bias[..],
                b.ff_w1.as_mut_slice(),
                &mut b.ff_b1[..],
                b.ff_w2.as_mut_slice(),
                &mut b.ff_b2[..],
                &mut b.ln2_gain[..],
                &mut b.ln2_bias[..],
            ]);
        }
        out.push(self.out_w.as_mut_slice());
        out.push(&mut self.out_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src = other.tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, x) in dst.iter_mut().zip(s) {
                *d += scale * x;
            }
        }
    }
}
