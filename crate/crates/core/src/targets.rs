//! Training targets (IRM, PSM) and mask application.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rustfft::num_complex::Complex64;

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Irm,
    Psm,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Irm => "irm",
            Objective::Psm => "psm",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "irm" => Ok(Objective::Irm),
            "psm" => Ok(Objective::Psm),
            other => Err(Error::InvalidConfig(format!("unknown objective `{other}`"))),
        }
    }
}

/// A real `L × K` mask with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    values: Matrix,
    objective: Objective,
}

impl MaskMatrix {
    /// Wraps estimated or hand-built mask values, clamping into `[0, 1]`.
    pub fn new(mut values: Matrix, objective: Objective) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("mask"));
        }
        for v in values.as_mut_slice() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { values, objective })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// One CSV row per frame.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for i in 0..self.values.rows() {
            let row: Vec<String> = self.values.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn zip_bins(
    a: &Spectrogram,
    b: &Spectrogram,
    f: impl Fn(Complex64, Complex64) -> f64,
) -> Result<Matrix> {
    a.same_shape(b)?;
    let (l, k) = a.shape();
    let data = a
        .coefficients()
        .iter()
        .zip(b.coefficients())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(l, k, data)
}

/// `sqrt(|S|² / (|S|² + |D|²))`; bins where both are zero get 0.
pub fn irm_value(s: Complex64, d: Complex64) -> f64 {
    let ps = s.norm_sqr();
    let pd = d.norm_sqr();
    let total = ps + pd;
    if total == 0.0 {
        0.0
    } else {
        (ps / total).sqrt()
    }
}

/// `(|S|/|X|)·cos(θ_S − θ_X)` clamped to `[0, 1]`. `Re(S·conj(X))/|X|²`
/// expands to the same quantity without evaluating angles.
pub fn psm_value(s: Complex64, x: Complex64) -> f64 {
    let px = x.norm_sqr();
    if px == 0.0 {
        return 0.0;
    }
    ((s * x.conj()).re / px).clamp(0.0, 1.0)
}

pub fn irm(clean: &Spectrogram, noise: &Spectrogram) -> Result<MaskMatrix> {
    let values = zip_bins(clean, noise, irm_value)?;
    MaskMatrix::new(values, Objective::Irm)
}

pub fn psm(clean: &Spectrogram, noisy: &Spectrogram) -> Result<MaskMatrix> {
    let values = zip_bins(clean, noisy, psm_value)?;
    MaskMatrix::new(values, Objective::Psm)
}

/// Target for `objective` given the clean, noise and noisy spectra.
pub fn target(
    objective: Objective,
    clean: &Spectrogram,
    noise: &Spectrogram,
    noisy: &Spectrogram,
) -> Result<MaskMatrix> {
    match objective {
        Objective::Irm => irm(clean, noise),
        Objective::Psm => psm(clean, noisy),
    }
}

/// `Ŝ = M̂·X`, keeping the noisy phase.
pub fn apply_mask(noisy: &Spectrogram, mask: &MaskMatrix) -> Result<Spectrogram> {
    if noisy.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram {:?} vs mask {:?}",
            noisy.shape(),
            mask.shape()
        )));
    }
    let scaled = noisy
        .coefficients()
        .iter()
        .zip(mask.values().as_slice())
        .map(|(x, &m)| x * m)
        .collect();
    noisy.with_coefficients(scaled)
}
