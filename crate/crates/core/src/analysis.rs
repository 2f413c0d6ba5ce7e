//! Theoretical multiply-accumulate counts per attention pattern, and a
//! wall-clock benchmark of the dense and sparse kernels.
//!
//! One MAC counts as 1. Softmax, layer norm and activations are not counted.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{attend_dense, attend_sparse, MhaParams};
use crate::model::ModelConfig;
use crate::pattern::{build_mask, layer_schedule, nnz, PatternSpec};
use crate::tensor::Matrix;

/// Attention models the calculator knows about. SepFormer is a MAC model
/// only: overlapping chunks of `chunk` frames with 50% overlap, two
/// intra-chunk and two inter-chunk layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionModel {
    Pattern(PatternSpec),
    SepFormer { chunk: usize },
}

impl fmt::Display for AttentionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionModel::Pattern(p) => write!(f, "{p}"),
            AttentionModel::SepFormer { chunk } => write!(f, "sepformer:{chunk}"),
        }
    }
}

impl FromStr for AttentionModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().strip_prefix("sepformer:") {
            Some(c) => {
                let chunk: usize = c
                    .parse()
                    .map_err(|_| Error::InvalidPattern(format!("bad chunk size in `{s}`")))?;
                if chunk == 0 {
                    return Err(Error::InvalidPattern("chunk size must be >= 1".into()));
                }
                Ok(AttentionModel::SepFormer { chunk })
            }
            None => Ok(AttentionModel::Pattern(s.parse()?)),
        }
    }
}

impl From<PatternSpec> for AttentionModel {
    fn from(p: PatternSpec) -> Self {
        AttentionModel::Pattern(p)
    }
}

/// Which terms to count. `Attention` covers the attention sublayer only
/// (projections, scores, context); `Network` adds the feed-forward
/// sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MacScope {
    #[default]
    Attention,
    Network,
}

impl FromStr for MacScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(MacScope::Attention),
            "network" => Ok(MacScope::Network),
            other => Err(Error::InvalidConfig(format!(
                "unknown MAC scope `{other}` (attention|network)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacReport {
    pub pattern: String,
    pub len: usize,
    pub macs_scores: u64,
    pub macs_context: u64,
    pub macs_proj: u64,
    pub macs_ffn: u64,
    pub macs_total: u64,
}

/// Number of 50%-overlapping chunks covering `len` frames.
pub fn sepformer_chunks(len: usize, chunk: usize) -> u64 {
    let s = (2 * len).div_ceil(chunk) as u64;
    s.saturating_sub(1).max(1)
}

/// MACs of the full B-layer stack at sequence length `len`.
pub fn macs_attention(
    model: &AttentionModel,
    len: usize,
    cfg: &ModelConfig,
    scope: MacScope,
) -> Result<MacReport> {
    if len == 0 {
        return Err(Error::InvalidConfig("sequence length must be >= 1".into()));
    }
    let d = cfg.d_model as u64;
    let dff = cfg.d_ff as u64;
    // (nnz, effective length) per layer
    let layers: Vec<(u64, u64)> = match model {
        AttentionModel::Pattern(spec) => {
            spec.validate()?;
            layer_schedule(cfg.blocks, spec)
                .iter()
                .map(|s| Ok((nnz(s, len)?, len as u64)))
                .collect::<Result<_>>()?
        }
        AttentionModel::SepFormer { chunk } => {
            if *chunk == 0 {
                return Err(Error::InvalidPattern("chunk size must be >= 1".into()));
            }
            let c = *chunk as u64;
            let s = sepformer_chunks(len, *chunk);
            vec![
                (s * c * c, s * c),
                (s * c * c, s * c),
                (c * s * s, c * s),
                (c * s * s, c * s),
            ]
        }
    };
    let mut r = MacReport {
        pattern: model.to_string(),
        len,
        macs_scores: 0,
        macs_context: 0,
        macs_proj: 0,
        macs_ffn: 0,
        macs_total: 0,
    };
    for (nz, eff) in layers {
        r.macs_scores += nz * d;
        r.macs_context += nz * d;
        r.macs_proj += 4 * eff * d * d;
        if scope == MacScope::Network {
            r.macs_ffn += 2 * eff * d * dff;
        }
    }
    r.macs_total = r.macs_scores + r.macs_context + r.macs_proj + r.macs_ffn;
    Ok(r)
}

/// One report per (model, length), sorted by pattern id then length.
pub fn macs_sweep(
    models: &[AttentionModel],
    lens: &[usize],
    cfg: &ModelConfig,
    scope: MacScope,
) -> Result<Vec<MacReport>> {
    if models.is_empty() || lens.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep needs at least one model and one length".into(),
        ));
    }
    let mut rows = Vec::with_capacity(models.len() * lens.len());
    for m in models {
        for &l in lens {
            rows.push(macs_attention(m, l, cfg, scope)?);
        }
    }
    rows.sort_by(|a, b| a.pattern.cmp(&b.pattern).then(a.len.cmp(&b.len)));
    Ok(rows)
}

pub fn write_macs_csv<W: Write>(rows: &[MacReport], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "pattern,L,macs_scores,macs_context,macs_proj,macs_ffn,macs_total"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.pattern, r.len, r.macs_scores, r.macs_context, r.macs_proj, r.macs_ffn, r.macs_total
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub pattern: String,
    pub len: usize,
    pub median_ns: f64,
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "pattern,L,median_ns")?;
    for r in rows {
        writeln!(out, "{},{},{:.0}", r.pattern, r.len, r.median_ns)?;
    }
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_median(repetitions: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?; // warm-up, not timed
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_nanos() as f64);
    }
    Ok(median(samples))
}

/// Median wall-clock of one forward call, per length: the dense kernel
/// under the full mask (row `dense:full`) and the sparse kernel for each
/// spec (rows `sparse:<spec>`). Runs on the calling thread.
pub fn bench_kernels(
    specs: &[PatternSpec],
    lens: &[usize],
    d_model: usize,
    heads: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repetitions < 3 {
        return Err(Error::InvalidConfig("repetitions must be >= 3".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = MhaParams::random(heads, d_model, &mut rng)?;
    let mut rows = Vec::new();
    for &len in lens {
        let x = Matrix::from_vec(
            len,
            d_model,
            (0..len * d_model)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )?;
        let full = build_mask(&PatternSpec::Full, len)?;
        let ns = time_median(repetitions, || {
            attend_dense(&x, &x, &x, &params, &full).map(drop)
        })?;
        rows.push(BenchRow {
            pattern: "dense:full".into(),
            len,
            median_ns: ns,
        });
        for spec in specs {
            let ns = time_median(repetitions, || {
                attend_sparse(&x, &x, &x, &params, spec).map(drop)
            })?;
            rows.push(BenchRow {
                pattern: format!("sparse:{spec}"),
                len,
                median_ns: ns,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wideband_ripple() -> ModelConfig {
        ModelConfig::wideband(PatternSpec::Ripple { w: 12, d: 24 })
    }

    #[test]
    fn full_scores_per_layer() {
        let r =
            macs_attention(&PatternSpec::Full.into(), 1000, &wideband_ripple(), MacScope::Network).unwrap();
        assert_eq!(r.macs_scores / 4, 256_000_000);
        assert_eq!(
            r.macs_total,
            r.macs_scores + r.macs_context + r.macs_proj + r.macs_ffn
        );
        assert_eq!(r.macs_ffn, 4 * 2 * 1000 * 256 * 1024);
    }

    #[test]
    fn attention_scope_drops_ffn() {
        let m = PatternSpec::Full.into();
        let a = macs_attention(&m, 500, &wideband_ripple(), MacScope::Attention).unwrap();
        let n = macs_attention(&m, 500, &wideband_ripple(), MacScope::Network).unwrap();
        assert_eq!(a.macs_ffn, 0);
        assert_eq!(n.macs_total - a.macs_total, n.macs_ffn);
    }

    #[test]
    fn ripple_lower_layers_use_band() {
        let cfg = wideband_ripple();
        let r = macs_attention(&cfg.pattern.into(), 300, &cfg, MacScope::Attention).unwrap();
        let band = nnz(&PatternSpec::Band { w: 12 }, 300).unwrap();
        let ripple = nnz(&cfg.pattern, 300).unwrap();
        assert_eq!(r.macs_scores, 2 * 256 * (band + ripple));
    }

    #[test]
    fn sepformer_chunking() {
        assert_eq!(sepformer_chunks(1, 50), 1);
        assert_eq!(sepformer_chunks(25, 50), 1);
        assert_eq!(sepformer_chunks(50, 50), 1);
        assert_eq!(sepformer_chunks(51, 50), 2);
        assert_eq!(sepformer_chunks(1000, 50), 39);
        let r = macs_attention(
            &AttentionModel::SepFormer { chunk: 50 },
            1000,
            &wideband_ripple(),
            MacScope::Attention,
        )
        .unwrap();
        let (s, c, d) = (39u64, 50u64, 256u64);
        assert_eq!(r.macs_scores, 2 * s * c * c * d + 2 * c * s * s * d);
        assert_eq!(r.macs_proj, 4 * 4 * s * c * d * d);
    }

    #[test]
    fn model_ids_round_trip() {
        for s in [
            "full",
            "band:12",
            "ripple:12:24",
            "blockwise:50",
            "sepformer:50",
        ] {
            assert_eq!(s.parse::<AttentionModel>().unwrap().to_string(), s);
        }
        assert!("sepformer:0".parse::<AttentionModel>().is_err());
        assert!("sepformer:x".parse::<AttentionModel>().is_err());
    }

    #[test]
    fn sweep_rows_sorted() {
        let models: Vec<AttentionModel> = ["ripple:12:24", "full", "sepformer:50"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let lens: Vec<usize> = (1..=30).map(|i| 100 * i).collect();
        let rows = macs_sweep(&models, &lens, &wideband_ripple(), MacScope::Attention).unwrap();
        assert_eq!(rows.len(), 90);
        assert_eq!(rows[0].pattern, "full");
        assert_eq!(rows[30].pattern, "ripple:12:24");
        assert!(rows[..30].windows(2).all(|w| w[0].len < w[1].len));
        let mut csv = Vec::new();
        write_macs_csv(&rows, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 91);
        assert!(macs_sweep(&[], &lens, &wideband_ripple(), MacScope::Attention).is_err());
    }

    #[test]
    fn bench_smoke() {
        let rows = bench_kernels(&[PatternSpec::Band { w: 4 }], &[16, 32], 8, 2, 3, 1).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows
            .iter()
            .all(|r| r.median_ns.is_finite() && r.median_ns > 0.0));
        assert!(bench_kernels(&[], &[16], 8, 2, 2, 1).is_err());
    }
}
