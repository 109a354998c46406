//! Property tests for the STFT, phase helpers and tridiagonal solvers.

use nalgebra::{Complex, DMatrix};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specinv::bench::random_system;
use specinv::phase::{bpd_from_tpd, tpd_from_bpd, wrap};
use specinv::solver::{dense_solve_oracle, iterative_solve, thomas_solve, TridiagonalHermitianSystem};
use specinv::stft::{istft, stft, AnalysisConfig, Waveform, WindowKind};
use specinv::synth::{chirp, tone, white_noise};

fn rel(x: &[Complex64], y: &[Complex64]) -> f64 {
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = y.iter().map(|b| b.norm_sqr()).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

fn inf(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn dense(sys: &TridiagonalHermitianSystem) -> DMatrix<Complex<f64>> {
    let n = sys.len();
    let d = sys.to_dense();
    DMatrix::from_fn(n, n, |r, c| Complex::new(d[r * n + c].re, d[r * n + c].im))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wrap_lands_in_half_open_interval(x in -1e4f64..1e4) {
        let w = wrap(x);
        prop_assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w));
        let k = (x - w) / (2.0 * std::f64::consts::PI);
        prop_assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn bpd_tpd_inverse(bpd in prop::collection::vec(-3.1f64..3.1, 33), hop in 1usize..32) {
        let back = bpd_from_tpd(&tpd_from_bpd(&bpd, hop, 32), hop, 32);
        for (a, b) in back.iter().zip(&bpd) {
            prop_assert!(wrap(a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn thomas_matches_dense_and_residual_bound(n in 2usize..300, seed in any::<u64>()) {
        let sys = random_system(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = thomas_solve(&sys).unwrap();
        let y = dense_solve_oracle(&sys).unwrap();
        prop_assert!(rel(&x, &y) < 1e-9, "rel {}", rel(&x, &y));
        let mut ax = vec![Complex64::new(0.0, 0.0); n];
        sys.matvec(&x, &mut ax);
        let shift = sys.regularization_shift();
        let r: Vec<Complex64> = ax.iter().zip(&x).zip(&sys.rhs).map(|((a, xi), b)| a + xi * shift - b).collect();
        prop_assert!(inf(&r) <= 1e-9 * (sys.inf_norm() * inf(&x) + inf(&sys.rhs)));
    }

    #[test]
    fn iterative_agrees(n in 2usize..200, seed in any::<u64>()) {
        let sys = random_system(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = iterative_solve(&sys, 1e-12, 10 * n).unwrap();
        let y = thomas_solve(&sys).unwrap();
        prop_assume!(out.converged);
        prop_assert!(rel(&out.x, &y) < 1e-6);
    }

    #[test]
    fn systems_are_hermitian_psd(n in 2usize..40, seed in any::<u64>()) {
        let sys = random_system(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = dense(&sys);
        prop_assert!((a.clone() - a.adjoint()).norm() < 1e-12 * a.norm());
        let eig = a.clone().symmetric_eigenvalues();
        let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(eig.iter().all(|v| *v >= -1e-12 * scale), "{eig}");
    }

    #[test]
    fn solution_is_linear_in_rhs(n in 2usize..100, seed in any::<u64>(), re in -5.0f64..5.0, im in -5.0f64..5.0) {
        prop_assume!(re.abs() + im.abs() > 1e-3);
        let c = Complex64::new(re, im);
        let sys = random_system(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut scaled = sys.clone();
        scaled.rhs.iter_mut().for_each(|b| *b *= c);
        let x = thomas_solve(&sys).unwrap();
        let xs = thomas_solve(&scaled).unwrap();
        let expect: Vec<Complex64> = x.iter().map(|v| v * c).collect();
        prop_assert!(rel(&xs, &expect) < 1e-12);
    }

    #[test]
    fn matrix_scaling_leaves_solution(n in 2usize..100, seed in any::<u64>(), s in 0.01f64..100.0) {
        let sys = random_system(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut scaled = sys.clone();
        scaled.diag.iter_mut().for_each(|d| *d *= s);
        scaled.lower.iter_mut().for_each(|d| *d *= s);
        scaled.upper.iter_mut().for_each(|d| *d *= s);
        scaled.rhs.iter_mut().for_each(|d| *d *= s);
        prop_assert!(rel(&thomas_solve(&scaled).unwrap(), &thomas_solve(&sys).unwrap()) < 1e-10);
    }

    #[test]
    fn stft_roundtrip_random_signals(len in 300usize..3000, seed in any::<u64>(), hop_div in prop::sample::select(vec![2usize, 4, 8])) {
        let cfg = AnalysisConfig::new(128, 128 / hop_div, WindowKind::Hann, 8000).unwrap();
        let mut w = white_noise(1.0, 8000, 0.3, seed);
        w.samples.truncate(len);
        let back = istft(&stft(&w, &cfg).unwrap()).unwrap();
        prop_assert_eq!(back.len(), w.len());
        let peak = w.peak();
        let err = back.samples.iter().zip(&w.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-9 * peak.max(1e-300), "err {}", err);
    }
}

#[test]
fn stft_roundtrip_structured_signals() {
    let cfg = AnalysisConfig::new(1024, 256, WindowKind::Hann, 16_000).unwrap();
    for w in [tone(440.0, 0.5, 16_000, 0.7), chirp(100.0, 7000.0, 0.5, 16_000, 0.5), white_noise(0.5, 16_000, 0.2, 9)] {
        let back = istft(&stft(&w, &cfg).unwrap()).unwrap();
        let err = back.samples.iter().zip(&w.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6 * w.peak(), "{err}");
    }
}

#[test]
fn gaussian_window_roundtrip() {
    let cfg = AnalysisConfig::new(256, 64, WindowKind::Gaussian { lambda: 0.25 }, 16_000).unwrap();
    let w = Waveform::new(chirp(200.0, 3000.0, 0.2, 16_000, 0.5).samples, 16_000).unwrap();
    let back = istft(&stft(&w, &cfg).unwrap()).unwrap();
    let err = back.samples.iter().zip(&w.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
}
