use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ripple_core::dsp::{istft, mix_at_snr, stft, Complex64, StftConfig, Waveform};
use ripple_core::kernel::{attend_sparse, attend_sparse_cached, MhaParams};
use ripple_core::model::{self, forward, ModelConfig, ModelParams};
use ripple_core::pattern::{build_mask, nnz, PatternSpec};
use ripple_core::targets::irm_value;
use ripple_core::tensor::Matrix;
use ripple_core::train::{clip_values, lr_at};

fn any_spec() -> impl Strategy<Value = PatternSpec> {
    prop_oneof![
        Just(PatternSpec::Full),
        (0usize..16).prop_map(|h| PatternSpec::Band { w: 2 * h }),
        ((0usize..16), (1usize..40)).prop_map(|(h, d)| PatternSpec::Ripple { w: 2 * h, d }),
        (1usize..60).prop_map(|block| PatternSpec::Blockwise { block }),
    ]
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_are_symmetric(spec in any_spec(), i in 0usize..400, j in 0usize..400) {
        prop_assert_eq!(spec.admits(i, j), spec.admits(j, i));
        prop_assert!(spec.admits(i, i));
    }

    #[test]
    fn band_inside_ripple_inside_full(h in 0usize..10, d in 1usize..30, i in 0usize..300, j in 0usize..300) {
        let band = PatternSpec::Band { w: 2 * h };
        let ripple = PatternSpec::Ripple { w: 2 * h, d };
        if band.admits(i, j) {
            prop_assert!(ripple.admits(i, j));
        }
        prop_assert!(PatternSpec::Full.admits(i, j));
    }

    #[test]
    fn ripple_row_degree_bound(h in 0usize..10, d in 1usize..30, len in 1usize..500) {
        let spec = PatternSpec::Ripple { w: 2 * h, d };
        let bound = (2 * h + 1) + 2 * len.div_ceil(d);
        for i in 0..len {
            prop_assert!(spec.row_degree(i, len) <= bound);
        }
    }

    #[test]
    fn nnz_matches_popcount(spec in any_spec(), len in 1usize..=300) {
        let mask = build_mask(&spec, len).unwrap();
        prop_assert_eq!(nnz(&spec, len).unwrap(), mask.popcount());
        let degrees: usize = (0..len).map(|i| spec.row_degree(i, len)).sum();
        prop_assert_eq!(degrees as u64, mask.popcount());
    }

    #[test]
    fn row_columns_ascending_and_admitted(spec in any_spec(), len in 1usize..200, i in 0usize..200) {
        let i = i % len;
        let mut cols = Vec::new();
        spec.row_columns(i, len, &mut cols);
        prop_assert!(cols.windows(2).all(|w| w[0] < w[1]));
        let expected: Vec<usize> = (0..len).filter(|&j| spec.admits(i, j)).collect();
        prop_assert_eq!(cols, expected);
    }

    #[test]
    fn irm_is_monotone(s in 0.0f64..10.0, d in 0.01f64..10.0, ds in 0.001f64..5.0) {
        let z = |m: f64| Complex64::new(m, 0.0);
        let base = irm_value(z(s), z(d));
        prop_assert!(irm_value(z(s + ds), z(d)) >= base);
        prop_assert!(irm_value(z(s), z(d + ds)) <= base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn mix_hits_snr(snr in -20.0f64..30.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean: Vec<f64> = (0..800).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise: Vec<f64> = (0..1000).map(|_| rng.random_range(-0.3..0.3)).collect();
        let clean = Waveform::new(clean, 16000).unwrap();
        let noise = Waveform::new(noise, 16000).unwrap();
        let (noisy, scaled) = mix_at_snr(&clean, &noise, snr).unwrap();
        let measured = 10.0 * (clean.power() / scaled.power()).log10();
        prop_assert!((measured - snr).abs() < 1e-9);
        for ((y, c), n) in noisy.samples().iter().zip(clean.samples()).zip(scaled.samples()) {
            prop_assert!((y - c - n).abs() < 1e-12);
        }
    }

    #[test]
    fn stft_round_trip(len in 512usize..6000, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(x, 16000).unwrap();
        let y = istft(&stft(&w, &StftConfig::wideband()).unwrap()).unwrap();
        prop_assert_eq!(y.len(), w.len());
        let err = w.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn clipping_bounds_and_idempotence(v in prop::collection::vec(-1e6f64..1e6, 0..50)) {
        let mut once = v.clone();
        clip_values(&mut once, 1.0).unwrap();
        prop_assert!(once.iter().all(|x| x.abs() <= 1.0));
        let mut twice = once.clone();
        clip_values(&mut twice, 1.0).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn schedule_peaks_at_warmup(d_model in 1usize..1024, wup in 1u64..5000, n in 1u64..20000) {
        let peak = lr_at(d_model, wup, wup).unwrap();
        prop_assert!(lr_at(d_model, wup, n).unwrap() <= peak * (1.0 + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Changing keys/values at a position a row does not attend to leaves
    /// that row unchanged.
    #[test]
    fn masked_positions_do_not_leak(spec in any_spec(), len in 2usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MhaParams::random(2, 8, &mut rng).unwrap();
        let q = random_matrix(&mut rng, len, 8);
        let k = random_matrix(&mut rng, len, 8);
        let v = random_matrix(&mut rng, len, 8);
        let i = rng.random_range(0..len);
        let Some(j) = (0..len).find(|&j| !spec.admits(i, j)) else { return Ok(()); };
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for c in 0..8 {
            k2.set(j, c, rng.random_range(-5.0..5.0));
            v2.set(j, c, rng.random_range(-5.0..5.0));
        }
        let a = attend_sparse(&q, &k, &v, &params, &spec).unwrap();
        let b = attend_sparse(&q, &k2, &v2, &params, &spec).unwrap();
        prop_assert_eq!(a.row(i), b.row(i));
    }

    /// Full attention commutes with a permutation of the frames.
    #[test]
    fn full_attention_is_permutation_equivariant(len in 1usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MhaParams::random(2, 8, &mut rng).unwrap();
        let x = random_matrix(&mut rng, len, 8);
        let mut perm: Vec<usize> = (0..len).collect();
        for a in (1..len).rev() {
            perm.swap(a, rng.random_range(0..=a));
        }
        let permute = |m: &Matrix| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&p| m.row(p).to_vec()).collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let y = attend_sparse(&x, &x, &x, &params, &PatternSpec::Full).unwrap();
        let xp = permute(&x);
        let yp = attend_sparse(&xp, &xp, &xp, &params, &PatternSpec::Full).unwrap();
        prop_assert!(yp.max_abs_diff(&permute(&y)) < 1e-12);
    }

    #[test]
    fn instrumented_macs_equal_theory(spec in any_spec(), len in 1usize..120, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MhaParams::random(4, 8, &mut rng).unwrap();
        let x = random_matrix(&mut rng, len, 8);
        let (_, cache) = attend_sparse_cached(&x, &x, &x, &params, &spec).unwrap();
        let expected = nnz(&spec, len).unwrap() * 8;
        prop_assert_eq!(cache.macs().scores, expected);
        prop_assert_eq!(cache.macs().context, expected);
    }

    /// After the band-only lower layers, frame `i` only sees frames within
    /// `layers · w/2`.
    #[test]
    fn band_layers_have_bounded_receptive_field(h in 1usize..4, d in 2usize..8, seed in 0u64..1000) {
        let len = 40;
        let cfg = ModelConfig { blocks: 4, heads: 2, d_model: 8, d_ff: 8, bins: 6, pattern: PatternSpec::Ripple { w: 2 * h, d } };
        let params = ModelParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_vec(len, 6, (0..len * 6).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
        let mid = len / 2;
        let far = mid + 2 * h + 1;
        let mut y = x.clone();
        for c in 0..6 {
            y.set(far, c, x.get(far, c) + 1.0);
        }
        let a = forward(&params, &x).unwrap();
        let b = forward(&params, &y).unwrap();
        prop_assert_eq!(a.block_output(1).row(mid), b.block_output(1).row(mid));
    }

    #[test]
    fn checkpoint_file_round_trip(seed in any::<u64>(), h in 0usize..4, d in 1usize..5) {
        let cfg = ModelConfig { blocks: 2, heads: 2, d_model: 4, d_ff: 6, bins: 3, pattern: PatternSpec::Ripple { w: 2 * h, d } };
        let params = ModelParams::init(cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        model::save(&params, &path).unwrap();
        prop_assert_eq!(model::load(&path).unwrap(), params);
    }
}
