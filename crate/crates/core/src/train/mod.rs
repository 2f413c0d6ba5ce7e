//! Mask-estimation training on synthetic mixtures: warm-up schedule, value
//! clipping and Adam.

mod data;
mod optim;

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use data::{make_synthetic_mixture, make_synthetic_pair, Mixture, MIN_DURATION_SECS};
pub use optim::{clip_gradients, clip_values, lr_at, Adam, LrSchedule};

use crate::dsp::{stft, StftConfig};
use crate::error::{Error, Result};
use crate::model::{backward, forward, ModelConfig, ModelParams};
use crate::targets::{target, Objective};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Mixture SNRs are drawn uniformly from the integers `snr_lo..=snr_hi`.
    pub snr_lo: i32,
    pub snr_hi: i32,
    pub utterances_per_step: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub clip: f64,
    pub duration_secs: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Irm,
            snr_lo: -10,
            snr_hi: 20,
            utterances_per_step: 4,
            steps: 500,
            warmup_steps: 100,
            clip: 1.0,
            duration_secs: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.snr_lo > self.snr_hi {
            return bad(format!("snr_lo {} > snr_hi {}", self.snr_lo, self.snr_hi));
        }
        if self.utterances_per_step == 0 || self.steps == 0 || self.warmup_steps == 0 {
            return bad("utterances_per_step, steps and warmup_steps must be >= 1".into());
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if !(self.duration_secs >= MIN_DURATION_SECS) {
            return bad(format!("duration_secs must be >= {MIN_DURATION_SECS}"));
        }
        Ok(())
    }
}

/// A training run description: the model shape plus the optimisation
/// settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses `key=value` lines. `#` starts a comment. Model keys are
    /// `blocks heads d_model d_ff bins pattern`; every training key is
    /// optional and falls back to [`TrainConfig::default`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got `{line}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let model_keys = ["blocks", "heads", "d_model", "d_ff", "bins", "pattern"];
        let model_text: String = model_keys
            .iter()
            .filter_map(|k| fields.get(k).map(|v| format!("{k}={v}\n")))
            .collect();
        let model = ModelConfig::from_text(&model_text)?;

        fn parse<T: std::str::FromStr>(
            fields: &HashMap<&str, &str>,
            key: &str,
            default: T,
        ) -> Result<T> {
            match fields.get(key) {
                None => Ok(default),
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad value `{v}` for `{key}`"))),
            }
        }
        let d = TrainConfig::default();
        let train = TrainConfig {
            objective: parse(&fields, "objective", d.objective)?,
            snr_lo: parse(&fields, "snr_lo", d.snr_lo)?,
            snr_hi: parse(&fields, "snr_hi", d.snr_hi)?,
            utterances_per_step: parse(&fields, "utterances_per_step", d.utterances_per_step)?,
            steps: parse(&fields, "steps", d.steps)?,
            warmup_steps: parse(&fields, "warmup_steps", d.warmup_steps)?,
            clip: parse(&fields, "clip", d.clip)?,
            duration_secs: parse(&fields, "duration_secs", d.duration_secs)?,
            seed: parse(&fields, "seed", d.seed)?,
        };
        let known: Vec<&str> = model_keys
            .iter()
            .copied()
            .chain([
                "objective",
                "snr_lo",
                "snr_hi",
                "utterances_per_step",
                "steps",
                "warmup_steps",
                "clip",
                "duration_secs",
                "seed",
            ])
            .collect();
        if let Some(k) = fields.keys().find(|k| !known.contains(k)) {
            return Err(Error::InvalidConfig(format!("unknown key `{k}`")));
        }
        train.validate()?;
        Ok(Self { model, train })
    }

    /// d_model 32, 2 blocks, 4 heads, 129 bins, ripple(4, 4).
    pub fn toy(objective: Objective) -> Self {
        Self {
            model: ModelConfig {
                blocks: 2,
                heads: 4,
                d_model: 32,
                d_ff: 64,
                bins: 129,
                pattern: crate::pattern::PatternSpec::Ripple { w: 4, d: 4 },
            },
            train: TrainConfig {
                objective,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn write_loss_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,lr,loss")?;
        for r in &self.history {
            writeln!(out, "{},{:e},{}", r.step, r.lr, r.loss)?;
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, step: u64, utt: u64) -> u64 {
    // splitmix64 finaliser over a combined key
    let mut z = seed
        .wrapping_add(step.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(utt.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Magnitude input and mask target for one synthetic utterance.
pub fn training_example(
    cfg: &TrainConfig,
    stft_cfg: &StftConfig,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snr = rng.random_range(cfg.snr_lo..=cfg.snr_hi) as f64;
    let mix = make_synthetic_mixture(rng.random(), cfg.duration_secs, snr)?;
    let clean = stft(&mix.clean, stft_cfg)?;
    let noise = stft(&mix.noise, stft_cfg)?;
    let noisy = stft(&mix.noisy, stft_cfg)?;
    let mask = target(cfg.objective, &clean, &noise, &noisy)?;
    Ok((noisy.magnitude(), mask.into_values()))
}

/// Fresh synthetic mixtures every step. Per-utterance gradients are
/// computed in parallel and summed in utterance order, so a run is
/// reproducible for a given seed regardless of thread count.
pub fn train(run: &RunConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    run.model.validate()?;
    run.train.validate()?;
    let tc = run.train;
    let stft_cfg = StftConfig::for_bins(run.model.bins)?;
    let schedule = LrSchedule::new(run.model.d_model, tc.warmup_steps)?;
    let mut params = ModelParams::init(run.model, tc.seed)?;
    let mut adam = Adam::new(params.num_params());
    let mut history = Vec::with_capacity(tc.steps as usize);

    for step in 1..=tc.steps {
        let results: Vec<Result<(f64, ModelParams)>> = (0..tc.utterances_per_step as u64)
            .into_par_iter()
            .map(|u| {
                let (x, t) = training_example(&tc, &stft_cfg, mix_seed(tc.seed, step, u))?;
                let cache = forward(&params, &x)?;
                let b = backward(&params, &cache, &t)?;
                Ok((b.loss, b.grads))
            })
            .collect();
        let scale = 1.0 / tc.utterances_per_step as f64;
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l * scale;
            grads.add_scaled(&g, scale);
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss diverged at step {step}")));
        }
        clip_gradients(&mut grads, tc.clip)?;
        let lr = schedule.lr_at(step)?;
        adam.step(&mut params, &grads, lr)?;
        if !params.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite parameters after step {step}"
            )));
        }
        let rec = StepRecord { step, lr, loss };
        on_step(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { params, history })
}

/// Mean of the first and last `n` losses.
pub fn head_tail_means(history: &[StepRecord], n: usize) -> Option<(f64, f64)> {
    if n == 0 || history.len() < n {
        return None;
    }
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..n]), mean(&history[history.len() - n..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_run_config() {
        let text = "# toy\nblocks=1\nheads=2\nd_model=8\nd_ff=16\nbins=33\npattern=band:4\n\
                    objective=psm\nsteps=3 # short\nsnr_lo=0\nsnr_hi=5\n";
        let run = RunConfig::from_text(text).unwrap();
        assert_eq!(run.model.bins, 33);
        assert_eq!(run.train.objective, Objective::Psm);
        assert_eq!(run.train.steps, 3);
        assert_eq!(
            run.train.utterances_per_step,
            TrainConfig::default().utterances_per_step
        );
        assert!(RunConfig::from_text(&format!("{text}bogus=1\n")).is_err());
        assert!(RunConfig::from_text(&text.replace("snr_hi=5", "snr_hi=-5")).is_err());
        assert!(RunConfig::from_text("blocks=1\n").is_err());
    }

    #[test]
    fn example_shapes() {
        let cfg = TrainConfig::default();
        let sc = StftConfig::for_bins(129).unwrap();
        let (x, t) = training_example(&cfg, &sc, 1).unwrap();
        assert_eq!(x.shape(), t.shape());
        assert_eq!(x.cols(), 129);
        assert_eq!(x.rows(), 62);
        assert!(t.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn short_run_is_deterministic() {
        let mut run = RunConfig::toy(Objective::Irm);
        run.model.d_model = 8;
        run.model.heads = 2;
        run.model.d_ff = 8;
        run.model.bins = 33;
        run.train.steps = 3;
        run.train.duration_secs = 0.2;
        let a = train(&run, |_| {}).unwrap();
        let b = train(&run, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        let mut csv = Vec::new();
        a.write_loss_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("step,lr,loss\n1,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
