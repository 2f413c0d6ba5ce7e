//! Waveform handling: STFT analysis/synthesis, SNR-controlled mixing and
//! 16-bit PCM WAV I/O.

mod stft;
pub mod wav;

pub use rustfft::num_complex::Complex64;
pub use stft::{istft, stft, Spectrogram, StftConfig};

use crate::error::{Error, Result};

/// Sample rate used by the enhancement pipeline.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono real-valued signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }
}

/// `10·log10(P_ref / P_err)` where the error is `estimate − reference`.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    assert_eq!(reference.len(), estimate.len());
    let p_ref: f64 = reference.iter().map(|s| s * s).sum();
    let p_err: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (e - r) * (e - r))
        .sum();
    10.0 * (p_ref / p_err).log10()
}

/// Scales a noise segment so that the clean-to-noise power ratio equals
/// `snr_db`, and returns `(noisy, scaled_noise)`.
///
/// The noise segment is the first `clean.len()` samples of `noise`; callers
/// that want a random segment slice the noise beforehand.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::InvalidConfig(format!(
            "sample rate mismatch: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if noise.len() < clean.len() {
        return Err(Error::InputTooShort {
            got: noise.len(),
            need: clean.len(),
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::NonFinite("snr"));
    }
    let segment = &noise.samples[..clean.len()];
    let p_clean = clean.power();
    let p_noise = segment.iter().map(|s| s * s).sum::<f64>() / segment.len().max(1) as f64;
    if p_clean == 0.0 {
        return Err(Error::ZeroPower("clean"));
    }
    if p_noise == 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    let scale = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = segment.iter().map(|s| s * scale).collect();
    let noisy: Vec<f64> = clean
        .samples
        .iter()
        .zip(&scaled)
        .map(|(c, n)| c + n)
        .collect();
    Ok((
        Waveform::new(noisy, clean.sample_rate)?,
        Waveform::new(scaled, clean.sample_rate)?,
    ))
}
