//! Synthetic speech-like/noise signals for desk-scale training.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{mix_at_snr, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MIN_DURATION_SECS: f64 = 0.2;

/// A clean signal, the noise scaled to the requested SNR, and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub clean: Waveform,
    pub noise: Waveform,
    pub noisy: Waveform,
    pub snr_db: f64,
}

/// Clean: 3–8 harmonics of a random fundamental (90–250 Hz), each with its
/// own slow amplitude modulation, peak-normalised to 0.5. Noise: white
/// Gaussian noise through a random one-pole low-pass.
pub fn make_synthetic_pair(seed: u64, duration_secs: f64) -> Result<(Waveform, Waveform)> {
    if !(duration_secs >= MIN_DURATION_SECS) {
        return Err(Error::InvalidConfig(format!(
            "duration must be >= {MIN_DURATION_SECS} s, got {duration_secs}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_secs * SAMPLE_RATE as f64).round() as usize;
    let fs = SAMPLE_RATE as f64;

    let f0 = rng.random_range(90.0..250.0);
    let partials = rng.random_range(3..=8usize);
    let mut harmonics: Vec<usize> = (1..=12).collect();
    // partial shuffle: pick `partials` distinct harmonic numbers
    for i in 0..partials {
        let j = rng.random_range(i..harmonics.len());
        harmonics.swap(i, j);
    }
    let components: Vec<(f64, f64, f64, f64, f64)> = harmonics[..partials]
        .iter()
        .map(|&k| {
            let amp = rng.random_range(0.3..1.0) / (k as f64).sqrt();
            let phase = rng.random_range(0.0..2.0 * PI);
            let am_rate = rng.random_range(2.0..6.0);
            let am_phase = rng.random_range(0.0..2.0 * PI);
            (k as f64 * f0, amp, phase, am_rate, am_phase)
        })
        .collect();
    let mut clean: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            components
                .iter()
                .map(|&(f, a, ph, ar, ap)| {
                    let env = 0.55 + 0.45 * (2.0 * PI * ar * t + ap).sin();
                    a * env * (2.0 * PI * f * t + ph).sin()
                })
                .sum()
        })
        .collect();
    let peak = clean.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        for s in &mut clean {
            *s *= 0.5 / peak;
        }
    }

    let pole = rng.random_range(0.0..0.95);
    let mut state = 0.0;
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            let white: f64 = rng.sample(StandardNormal);
            state = pole * state + (1.0 - pole) * white;
            state
        })
        .collect();
    Ok((
        Waveform::new(clean, SAMPLE_RATE)?,
        Waveform::new(noise, SAMPLE_RATE)?,
    ))
}

pub fn make_synthetic_mixture(seed: u64, duration_secs: f64, snr_db: f64) -> Result<Mixture> {
    let (clean, noise) = make_synthetic_pair(seed, duration_secs)?;
    let (noisy, noise) = mix_at_snr(&clean, &noise, snr_db)?;
    Ok(Mixture {
        clean,
        noise,
        noisy,
        snr_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftConfig};

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            make_synthetic_pair(3, 0.5).unwrap(),
            make_synthetic_pair(3, 0.5).unwrap()
        );
        assert_ne!(
            make_synthetic_pair(3, 0.5).unwrap().0,
            make_synthetic_pair(4, 0.5).unwrap().0
        );
    }

    #[test]
    fn clean_energy_sits_below_4khz() {
        let cfg = StftConfig::wideband();
        // bin spacing 16000/512 = 31.25 Hz, so 4 kHz is bin 128
        for seed in 0..10 {
            let (clean, _) = make_synthetic_pair(seed, 1.0).unwrap();
            let spec = stft(&clean, &cfg).unwrap();
            let (mut low, mut total) = (0.0, 0.0);
            for l in 0..spec.num_frames() {
                for (k, c) in spec.frame(l).iter().enumerate() {
                    total += c.norm_sqr();
                    if k < 128 {
                        low += c.norm_sqr();
                    }
                }
            }
            assert!(low / total >= 0.8, "seed {seed}: {}", low / total);
        }
    }

    #[test]
    fn mixture_hits_requested_snr() {
        let m = make_synthetic_mixture(9, 0.3, -7.0).unwrap();
        let measured = 10.0 * (m.clean.power() / m.noise.power()).log10();
        assert!((measured + 7.0).abs() < 1e-9);
    }

    #[test]
    fn too_short_is_rejected() {
        assert!(make_synthetic_pair(0, 0.1).is_err());
        assert!(make_synthetic_pair(0, f64::NAN).is_err());
    }
}
