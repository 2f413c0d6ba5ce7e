use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Analysis/synthesis parameters. The hop is always half the window.
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    fft_size: usize,
    win_length: usize,
    hop_length: usize,
    window: Vec<f64>,
}

impl StftConfig {
    /// Square-root Hann window of `win_length` samples, 50% overlap.
    ///
    /// The window is sampled at half-integer points, `sin(π(n + ½)/N)`, so
    /// that its square is a Hann window that sums to exactly one under 50%
    /// overlap and is nonzero at every sample (including the first frame's
    /// leading edge, which is covered by a single frame).
    pub fn new(fft_size: usize, win_length: usize) -> Result<Self> {
        if win_length < 2 || win_length % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "window length must be even and >= 2, got {win_length}"
            )));
        }
        if win_length > fft_size {
            return Err(Error::InvalidConfig(format!(
                "window length {win_length} exceeds fft size {fft_size}"
            )));
        }
        let n = win_length as f64;
        let window = (0..win_length)
            .map(|i| (PI * (i as f64 + 0.5) / n).sin())
            .collect();
        Ok(Self {
            fft_size,
            win_length,
            hop_length: win_length / 2,
            window,
        })
    }

    /// 512-point FFT with a 32 ms window at 16 kHz (257 bins).
    pub fn wideband() -> Self {
        Self::new(512, 512).expect("static config is valid")
    }

    /// Config whose one-sided spectrum has `bins` bins and whose window spans
    /// the whole FFT.
    pub fn for_bins(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 bins, got {bins}"
            )));
        }
        let n = 2 * (bins - 1);
        Self::new(n, n)
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn win_length(&self) -> usize {
        self.win_length
    }

    pub fn hop_length(&self) -> usize {
        self.hop_length
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len <= self.win_length {
            return 1;
        }
        1 + (len - self.win_length).div_ceil(self.hop_length)
    }
}

/// One-sided complex spectrogram, `L` frames by `K` bins, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: Vec<Complex64>,
    num_frames: usize,
    config: StftConfig,
    origin_length: usize,
    sample_rate: u32,
}

impl Spectrogram {
    /// Builds a spectrogram from raw coefficients, e.g. a modified copy of an
    /// analysed signal.
    pub fn from_parts(
        frames: Vec<Complex64>,
        num_frames: usize,
        config: StftConfig,
        origin_length: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        let k = config.num_bins();
        if num_frames == 0 || frames.len() != num_frames * k {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for {num_frames} frames of {k} bins",
                frames.len()
            )));
        }
        if config.num_frames(origin_length) != num_frames {
            return Err(Error::ShapeMismatch(format!(
                "{num_frames} frames cannot describe {origin_length} samples"
            )));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Self {
            frames,
            num_frames,
            config,
            origin_length,
            sample_rate,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_bins(&self) -> usize {
        self.config.num_bins()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_frames, self.num_bins())
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.frames
    }

    pub fn frame(&self, l: usize) -> &[Complex64] {
        let k = self.num_bins();
        &self.frames[l * k..(l + 1) * k]
    }

    #[inline]
    pub fn get(&self, l: usize, k: usize) -> Complex64 {
        self.frames[l * self.num_bins() + k]
    }

    /// `|X|` as an `L × K` matrix.
    pub fn magnitude(&self) -> Matrix {
        let (l, k) = self.shape();
        Matrix::from_vec(l, k, self.frames.iter().map(|c| c.norm()).collect())
            .expect("shape is consistent")
    }

    /// Same metadata, new coefficients.
    pub fn with_coefficients(&self, frames: Vec<Complex64>) -> Result<Self> {
        Self::from_parts(
            frames,
            self.num_frames,
            self.config.clone(),
            self.origin_length,
            self.sample_rate,
        )
    }

    pub(crate) fn same_shape(&self, other: &Spectrogram) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Frame `l` covers samples `[l·hop, l·hop + win)`; the tail is zero-padded
/// so the last frame reaches the end of the signal.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    let x = w.samples();
    if x.len() < cfg.win_length {
        return Err(Error::InputTooShort {
            got: x.len(),
            need: cfg.win_length,
        });
    }
    let frames = cfg.num_frames(x.len());
    let k = cfg.num_bins();
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut out = Vec::with_capacity(frames * k);
    for l in 0..frames {
        let start = l * cfg.hop_length;
        buf.fill(Complex64::new(0.0, 0.0));
        for (n, (b, wn)) in buf.iter_mut().zip(&cfg.window).enumerate() {
            if let Some(&s) = x.get(start + n) {
                b.re = s * wn;
            }
        }
        fft.process(&mut buf);
        out.extend_from_slice(&buf[..k]);
    }
    Spectrogram::from_parts(out, frames, cfg.clone(), x.len(), w.sample_rate())
}

/// Weighted overlap-add resynthesis, normalised by the summed squared window
/// so the analysis/synthesis pair is exactly invertible.
pub fn istft(spec: &Spectrogram) -> Result<Waveform> {
    let cfg = &spec.config;
    let n = cfg.fft_size;
    let k = spec.num_bins();
    let padded = (spec.num_frames - 1) * cfg.hop_length + cfg.win_length;
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut acc = vec![0.0; padded];
    let mut envelope = vec![0.0; padded];
    for l in 0..spec.num_frames {
        let frame = spec.frame(l);
        buf[..k].copy_from_slice(frame);
        for j in k..n {
            buf[j] = frame[n - j].conj();
        }
        ifft.process(&mut buf);
        let start = l * cfg.hop_length;
        for (i, wn) in cfg.window.iter().enumerate() {
            acc[start + i] += buf[i].re / n as f64 * wn;
            envelope[start + i] += wn * wn;
        }
    }
    let samples = acc
        .iter()
        .zip(&envelope)
        .take(spec.origin_length)
        .map(|(a, e)| a / e)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(s: Vec<f64>) -> Waveform {
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        wave((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn wideband_config_has_257_bins() {
        let cfg = StftConfig::wideband();
        assert_eq!(cfg.num_bins(), 257);
        assert_eq!(cfg.hop_length(), 256);
        let spec = stft(&random_wave(16_000, 1), &cfg).unwrap();
        assert_eq!(spec.num_bins(), 257);
    }

    #[test]
    fn window_is_square_root_of_a_cola_hann() {
        let cfg = StftConfig::new(256, 256).unwrap();
        let w = cfg.window();
        for n in 0..128 {
            assert!((w[n] * w[n] + w[n + 128] * w[n + 128] - 1.0).abs() < 1e-15);
            assert!(w[n] > 0.0 && w[n] <= 1.0);
        }
    }

    #[test]
    fn frame_count_follows_tail_padding() {
        let cfg = StftConfig::new(512, 512).unwrap();
        assert_eq!(cfg.num_frames(512), 1);
        assert_eq!(cfg.num_frames(513), 2);
        assert_eq!(cfg.num_frames(768), 2);
        assert_eq!(cfg.num_frames(769), 3);
        // 1 + floor((len_padded - win) / hop) with len_padded a hop multiple
        let len = 16_000;
        let frames = cfg.num_frames(len);
        let padded = (frames - 1) * 256 + 512;
        assert!(padded >= len && padded - len < 256);
    }

    #[test]
    fn zero_input_gives_zero_frames() {
        let spec = stft(&wave(vec![0.0; 16_000]), &StftConfig::wideband()).unwrap();
        assert!(spec
            .coefficients()
            .iter()
            .all(|c| c.re == 0.0 && c.im == 0.0));
    }

    #[test]
    fn impulse_matches_direct_dft() {
        let cfg = StftConfig::wideband();
        let mut x = vec![0.0; 2048];
        x[0] = 1.0;
        let spec = stft(&wave(x.clone()), &cfg).unwrap();
        // direct O(N²) DFT of the first windowed frame
        let n = cfg.fft_size();
        for k in 0..cfg.num_bins() {
            let mut acc = Complex64::new(0.0, 0.0);
            for t in 0..cfg.win_length() {
                let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                acc += Complex64::from_polar(x[t] * cfg.window()[t], ang);
            }
            assert!((spec.get(0, k) - acc).norm() < 1e-12);
            assert!((spec.get(0, k).norm() - cfg.window()[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn round_trip_reconstructs_random_signal() {
        let cfg = StftConfig::wideband();
        for (seed, len) in [(1u64, 16_000usize), (2, 1000), (3, 512), (4, 12_345)] {
            let x = random_wave(len, seed);
            let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
            assert_eq!(y.len(), x.len());
            let err = x
                .samples()
                .iter()
                .zip(y.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "len {len}: {err}");
        }
    }

    #[test]
    fn round_trip_preserves_sine_rms() {
        let x = wave(
            (0..16_000)
                .map(|i| (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin())
                .collect(),
        );
        let y = istft(&stft(&x, &StftConfig::wideband()).unwrap()).unwrap();
        assert!((x.rms() - y.rms()).abs() / x.rms() < 1e-6);
    }

    #[test]
    fn zero_spectrogram_resynthesises_silence() {
        let cfg = StftConfig::new(64, 64).unwrap();
        let frames = cfg.num_frames(200);
        let spec = Spectrogram::from_parts(
            vec![Complex64::new(0.0, 0.0); frames * 33],
            frames,
            cfg,
            200,
            SAMPLE_RATE,
        )
        .unwrap();
        let y = istft(&spec).unwrap();
        assert!(y.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn linearity() {
        let cfg = StftConfig::new(128, 128).unwrap();
        let x = random_wave(1000, 7);
        let y = random_wave(1000, 8);
        let (a, b) = (0.7, -1.9);
        let z = wave(
            x.samples()
                .iter()
                .zip(y.samples())
                .map(|(p, q)| a * p + b * q)
                .collect(),
        );
        let (sx, sy, sz) = (
            stft(&x, &cfg).unwrap(),
            stft(&y, &cfg).unwrap(),
            stft(&z, &cfg).unwrap(),
        );
        for i in 0..sz.coefficients().len() {
            let lin = sx.coefficients()[i] * a + sy.coefficients()[i] * b;
            assert!((lin - sz.coefficients()[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let cfg = StftConfig::wideband();
        assert!(matches!(
            stft(&random_wave(100, 1), &cfg),
            Err(Error::InputTooShort { .. })
        ));
        assert!(StftConfig::new(256, 257).is_err());
        assert!(StftConfig::new(256, 255).is_err());
        let frames = cfg.num_frames(1000);
        assert!(Spectrogram::from_parts(vec![], frames, cfg.clone(), 1000, SAMPLE_RATE).is_err());
        assert!(Spectrogram::from_parts(
            vec![Complex64::new(0.0, 0.0); 257],
            1,
            cfg,
            5000,
            SAMPLE_RATE
        )
        .is_err());
    }
}
