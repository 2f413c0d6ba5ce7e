//! Attention mask patterns.
//!
//! All four kinds are symmetric in `|i − j|`, always admit the diagonal and
//! clip at the sequence boundaries:
//!
//! | kind      | `m[i][j]` holds when                                   |
//! |-----------|--------------------------------------------------------|
//! | Full      | always                                                 |
//! | Band      | `|i − j| ≤ w/2`                                        |
//! | Ripple    | `|i − j| ≤ w/2`, or `|i − j| = w/2 + m·d` for `m ≥ 1`  |
//! | Blockwise | `⌊i/block⌋ = ⌊j/block⌋`                                |
//!
//! Ripple combines a fine-grained local band with dilated global links that
//! start at the edge of the band and repeat every `d` frames.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternSpec {
    Full,
    Band { w: usize },
    Ripple { w: usize, d: usize },
    Blockwise { block: usize },
}

impl PatternSpec {
    pub fn band(w: usize) -> Result<Self> {
        let p = PatternSpec::Band { w };
        p.validate()?;
        Ok(p)
    }

    pub fn ripple(w: usize, d: usize) -> Result<Self> {
        let p = PatternSpec::Ripple { w, d };
        p.validate()?;
        Ok(p)
    }

    pub fn blockwise(block: usize) -> Result<Self> {
        let p = PatternSpec::Blockwise { block };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PatternSpec::Full => Ok(()),
            PatternSpec::Band { w } | PatternSpec::Ripple { w, .. } if w % 2 != 0 => Err(
                Error::InvalidPattern(format!("window w must be even, got {w}")),
            ),
            PatternSpec::Ripple { d: 0, .. } => {
                Err(Error::InvalidPattern("dilation d must be >= 1".into()))
            }
            PatternSpec::Blockwise { block: 0 } => {
                Err(Error::InvalidPattern("block size must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PatternSpec::Full => "full",
            PatternSpec::Band { .. } => "band",
            PatternSpec::Ripple { .. } => "ripple",
            PatternSpec::Blockwise { .. } => "blockwise",
        }
    }

    /// Whether query frame `i` may attend to key frame `j`. Coordinates are
    /// assumed to be inside the sequence.
    #[inline]
    pub fn admits(&self, i: usize, j: usize) -> bool {
        let off = i.abs_diff(j);
        match *self {
            PatternSpec::Full => true,
            PatternSpec::Band { w } => off <= w / 2,
            PatternSpec::Ripple { w, d } => {
                let h = w / 2;
                off <= h || (off - h) % d == 0
            }
            PatternSpec::Blockwise { block } => i / block == j / block,
        }
    }

    /// Appends the admissible key columns of row `i`, ascending, to `out`.
    /// Runs in time proportional to the row degree, not `len`.
    pub fn row_columns(&self, i: usize, len: usize, out: &mut Vec<usize>) {
        debug_assert!(i < len);
        match *self {
            PatternSpec::Full => out.extend(0..len),
            PatternSpec::Band { w } => {
                let h = w / 2;
                out.extend(i.saturating_sub(h)..(i + h + 1).min(len));
            }
            PatternSpec::Ripple { w, d } => {
                let h = w / 2;
                // left dilated links, farthest first
                if i > h {
                    let m_max = (i - h) / d;
                    out.extend((1..=m_max).rev().map(|m| i - h - m * d));
                }
                out.extend(i.saturating_sub(h)..(i + h + 1).min(len));
                let mut j = i + h + d;
                while j < len {
                    out.push(j);
                    j += d;
                }
            }
            PatternSpec::Blockwise { block } => {
                let start = (i / block) * block;
                out.extend(start..(start + block).min(len));
            }
        }
    }

    pub fn row_degree(&self, i: usize, len: usize) -> usize {
        match *self {
            PatternSpec::Full => len,
            PatternSpec::Band { w } => band_degree(i, len, w / 2),
            PatternSpec::Ripple { w, d } => {
                let h = w / 2;
                let left = if i > h { (i - h) / d } else { 0 };
                let right_room = len - 1 - i;
                let right = if right_room > h {
                    (right_room - h) / d
                } else {
                    0
                };
                band_degree(i, len, h) + left + right
            }
            PatternSpec::Blockwise { block } => {
                let start = (i / block) * block;
                (start + block).min(len) - start
            }
        }
    }
}

fn band_degree(i: usize, len: usize, h: usize) -> usize {
    (i + h + 1).min(len) - i.saturating_sub(h)
}

/// `Σ_{k=1}^{K} (len − k)` for `K = min(max_off, len − 1)`.
fn offset_pairs(len: usize, max_off: usize) -> u64 {
    let k = max_off.min(len.saturating_sub(1)) as u64;
    let len = len as u64;
    k * len - k * (k + 1) / 2
}

/// Closed-form count of admissible `(i, j)` pairs in an `len × len` mask.
pub fn nnz(spec: &PatternSpec, len: usize) -> Result<u64> {
    spec.validate()?;
    let l = len as u64;
    Ok(match *spec {
        PatternSpec::Full => l * l,
        PatternSpec::Band { w } => l + 2 * offset_pairs(len, w / 2),
        PatternSpec::Ripple { w, d } => {
            let h = w / 2;
            let band = l + 2 * offset_pairs(len, h);
            // offsets h + m·d, m = 1..=M, each contributing 2·(len − offset)
            let dilated = if len > h + 1 {
                let m = ((len - 1 - h) / d) as u64;
                let (h, d) = (h as u64, d as u64);
                m * (l - h) - d * m * (m + 1) / 2
            } else {
                0
            };
            band + 2 * dilated
        }
        PatternSpec::Blockwise { block } => {
            let b = block as u64;
            let (q, r) = (l / b, l % b);
            q * b * b + r * r
        }
    })
}

impl fmt::Display for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PatternSpec::Full => write!(f, "full"),
            PatternSpec::Band { w } => write!(f, "band:{w}"),
            PatternSpec::Ripple { w, d } => write!(f, "ripple:{w}:{d}"),
            PatternSpec::Blockwise { block } => write!(f, "blockwise:{block}"),
        }
    }
}

impl FromStr for PatternSpec {
    type Err = Error;

    /// `full`, `band:W`, `ripple:W:D` or `blockwise:B`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::InvalidPattern(format!("bad number `{p}` in `{s}`")))
        };
        let spec = match parts.as_slice() {
            ["full"] => PatternSpec::Full,
            ["band", w] => PatternSpec::Band { w: num(w)? },
            ["ripple", w, d] => PatternSpec::Ripple {
                w: num(w)?,
                d: num(d)?,
            },
            ["blockwise", b] => PatternSpec::Blockwise { block: num(b)? },
            _ => return Err(Error::InvalidPattern(format!("cannot parse `{s}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A materialised `L × L` boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    len: usize,
    bits: Vec<bool>,
    spec: Option<PatternSpec>,
}

impl BoolMask {
    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                bits.push(f(i, j));
            }
        }
        Self {
            len,
            bits,
            spec: None,
        }
    }

    pub fn all(len: usize) -> Self {
        let mut m = Self::from_fn(len, |_, _| true);
        m.spec = Some(PatternSpec::Full);
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spec(&self) -> Option<PatternSpec> {
        self.spec
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.len + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.len + j] = v;
        self.spec = None;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.len..(i + 1) * self.len]
    }

    pub fn popcount(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn row_degrees(&self) -> Vec<usize> {
        (0..self.len)
            .map(|i| self.row(i).iter().filter(|&&b| b).count())
            .collect()
    }

    /// Plain PBM ("P1"), one text line per row, `1` = attend.
    pub fn write_pbm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "P1")?;
        writeln!(out, "{} {}", self.len, self.len)?;
        for i in 0..self.len {
            let line: String = self
                .row(i)
                .iter()
                .map(|&b| if b { '1' } else { '0' })
                .collect();
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn write_degree_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,degree")?;
        for (i, d) in self.row_degrees().into_iter().enumerate() {
            writeln!(out, "{i},{d}")?;
        }
        Ok(())
    }
}

/// Materialises the mask described by `spec` for a sequence of `len` frames.
pub fn build_mask(spec: &PatternSpec, len: usize) -> Result<BoolMask> {
    spec.validate()?;
    if len == 0 {
        return Err(Error::InvalidConfig("sequence length must be >= 1".into()));
    }
    let mut m = BoolMask::from_fn(len, |i, j| spec.admits(i, j));
    m.spec = Some(*spec);
    Ok(m)
}

/// Per-layer patterns for a `blocks`-layer encoder. A ripple request puts
/// band-only attention on the lower `⌊blocks/2⌋` layers; other kinds repeat.
pub fn layer_schedule(blocks: usize, spec: &PatternSpec) -> Vec<PatternSpec> {
    match *spec {
        PatternSpec::Ripple { w, .. } => {
            let band_layers = blocks / 2;
            (0..blocks)
                .map(|b| {
                    if b < band_layers {
                        PatternSpec::Band { w }
                    } else {
                        *spec
                    }
                })
                .collect()
        }
        other => vec![other; blocks],
    }
}
