//! Phase-derivative features: frequency (FPD), time (TPD) and baseband (BPD)
//! phase differences, the complex ratios built from them, and a numerical
//! check of the Gaussian-window gradient relations.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::stft::{log_magnitude, stft, AnalysisConfig, WindowKind, Waveform};

const TWO_PI: f64 = 2.0 * PI;

/// Maps an angle into `[−π, π)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let mut r = x - TWO_PI * ((x + PI) / TWO_PI).floor();
    // floor() can land one ulp off at the boundaries.
    if r >= PI {
        r -= TWO_PI;
    } else if r < -PI {
        r += TWO_PI;
    }
    r
}

/// Wrapped phases, frame-major `(L+1) × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMatrix {
    bins: usize,
    frames: usize,
    data: Vec<f64>,
}

impl PhaseMatrix {
    /// Entries are wrapped on construction.
    pub fn new(bins: usize, frames: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), bins * frames, "phase matrix shape");
        let data = data.into_iter().map(wrap).collect();
        Self { bins, frames, data }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame(&self, tau: usize) -> &[f64] {
        &self.data[tau * self.bins..(tau + 1) * self.bins]
    }

    pub fn get(&self, bin: usize, tau: usize) -> f64 {
        self.data[tau * self.bins + bin]
    }
}

/// Per-frame features fed to the phase solver.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDerivativeFrame {
    /// Length `L`; entry `ω−1` relates bins `ω−1` and `ω`.
    pub fpd: Vec<f64>,
    /// Length `L+1`.
    pub bpd: Vec<f64>,
    pub frame_index: usize,
}

/// `ω`-ratios (length `L`) and `τ`-ratios (length `L+1`) of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexRatios {
    pub u_ratio: Vec<Complex64>,
    pub v_ratio: Vec<Complex64>,
}

fn check_frame(phase: &PhaseMatrix, tau: usize) -> Result<()> {
    if tau >= phase.frames {
        return Err(Error::FrameOutOfRange {
            index: tau,
            frames: phase.frames,
        });
    }
    Ok(())
}

pub fn fpd(phase: &PhaseMatrix, tau: usize) -> Result<Vec<f64>> {
    check_frame(phase, tau)?;
    let col = phase.frame(tau);
    Ok(col.windows(2).map(|p| wrap(p[1] - p[0])).collect())
}

/// Time difference against frame `τ−1`; undefined for `τ = 0`.
pub fn tpd(phase: &PhaseMatrix, tau: usize) -> Result<Vec<f64>> {
    check_frame(phase, tau)?;
    if tau == 0 {
        return Err(Error::FrameOutOfRange {
            index: 0,
            frames: phase.frames,
        });
    }
    let cur = phase.frame(tau);
    let prev = phase.frame(tau - 1);
    Ok(cur.iter().zip(prev).map(|(c, p)| wrap(c - p)).collect())
}

/// Phase advance of a stationary sinusoid centred on bin `ω` over one hop.
#[inline]
fn carrier_advance(hop: usize, half: usize, bin: usize) -> f64 {
    hop as f64 * PI * bin as f64 / half as f64
}

pub fn bpd_from_tpd(tpd: &[f64], hop: usize, half: usize) -> Vec<f64> {
    tpd.iter()
        .enumerate()
        .map(|(w, v)| wrap(v - carrier_advance(hop, half, w)))
        .collect()
}

pub fn tpd_from_bpd(bpd: &[f64], hop: usize, half: usize) -> Vec<f64> {
    bpd.iter()
        .enumerate()
        .map(|(w, b)| wrap(b + carrier_advance(hop, half, w)))
        .collect()
}

/// Ground-truth FPD and BPD for frame `τ ≥ 1`.
pub fn frame_features(
    phase: &PhaseMatrix,
    tau: usize,
    hop: usize,
    half: usize,
) -> Result<PhaseDerivativeFrame> {
    let fpd = fpd(phase, tau)?;
    let bpd = bpd_from_tpd(&tpd(phase, tau)?, hop, half);
    Ok(PhaseDerivativeFrame {
        fpd,
        bpd,
        frame_index: tau,
    })
}

/// Polar construction of the ratios from floored magnitudes and phase
/// differences.
pub fn complex_ratios(
    mag_prev: &[f64],
    mag_cur: &[f64],
    fpd_hat: &[f64],
    tpd_hat: &[f64],
) -> Result<ComplexRatios> {
    let n = mag_cur.len();
    if n == 0 || mag_prev.len() != n || tpd_hat.len() != n || fpd_hat.len() + 1 != n {
        return Err(Error::Shape(format!(
            "complex_ratios expects lengths (n, n, n-1, n); got ({}, {}, {}, {})",
            mag_prev.len(),
            n,
            fpd_hat.len(),
            tpd_hat.len()
        )));
    }
    let u_ratio = fpd_hat
        .iter()
        .enumerate()
        .map(|(l, &ang)| Complex64::from_polar(mag_cur[l + 1] / mag_cur[l], ang))
        .collect();
    let v_ratio = tpd_hat
        .iter()
        .enumerate()
        .map(|(l, &ang)| Complex64::from_polar(mag_cur[l] / mag_prev[l], ang))
        .collect();
    Ok(ComplexRatios { u_ratio, v_ratio })
}

/// Median absolute residuals of the two gradient relations, in radians per
/// bin: `(∂Φ/∂ω + λ ∂logM/∂t, λ(∂Φ/∂t − 2πω) − ∂logM/∂ω)`.
///
/// Time is measured in units of the window length (`t = n / 2L`), which makes
/// bins cycles-per-unit and `λ` dimensionless. Derivatives are central
/// differences; only bins above `1e-3·max|Y|` in frames whose window lies
/// fully inside the signal are used.
pub fn gradient_theorem_residual(wave: &Waveform, cfg: &AnalysisConfig) -> Result<(f64, f64)> {
    let WindowKind::Gaussian { lambda } = cfg.window() else {
        return Err(Error::WindowKind(
            "gradient relations need a Gaussian window".into(),
        ));
    };
    let spec = stft(wave, cfg)?;
    let logm = log_magnitude(&spec);
    let phase = spec.phases();
    let half = cfg.half();
    let hop = cfg.hop();
    let dt = hop as f64 / cfg.win_len() as f64;
    let threshold = 1e-3 * spec.max_magnitude();

    let mut res_freq = Vec::new();
    let mut res_time = Vec::new();
    for tau in 1..spec.frames().saturating_sub(1) {
        let (lo, hi) = ((tau - 1) * hop, (tau + 1) * hop);
        if lo < half || hi + half > wave.len() {
            continue;
        }
        for w in 1..half {
            if spec.get(w, tau).norm() <= threshold {
                continue;
            }
            let dphi_dw = wrap(phase.get(w + 1, tau) - phase.get(w - 1, tau)) / 2.0;
            let dm_dt = (logm.get(w, tau + 1) - logm.get(w, tau - 1)) / (2.0 * dt);
            res_freq.push((dphi_dw + lambda * dm_dt).abs());

            let expected = TWO_PI * w as f64 * 2.0 * dt;
            let dphi_dt =
                wrap(phase.get(w, tau + 1) - phase.get(w, tau - 1) - expected) / (2.0 * dt);
            let dm_dw = (logm.get(w + 1, tau) - logm.get(w - 1, tau)) / 2.0;
            res_time.push((lambda * dphi_dt - dm_dw).abs());
        }
    }
    if res_freq.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok((median(&mut res_freq), median(&mut res_time)))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_phases(bins: usize, frames: usize, seed: u64) -> PhaseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..bins * frames).map(|_| rng.random_range(-PI..PI)).collect();
        PhaseMatrix::new(bins, frames, data)
    }

    #[test]
    fn wrap_values() {
        assert_eq!(wrap(0.0), 0.0);
        assert_eq!(wrap(PI), -PI);
        assert_eq!(wrap(-PI), -PI);
        for k in -2..=2 {
            let x = 1.5 * PI + TWO_PI * k as f64;
            assert!((wrap(x) + 0.5 * PI).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn fpd_cases() {
        let flat = PhaseMatrix::new(5, 1, vec![0.3; 5]);
        assert!(fpd(&flat, 0).unwrap().iter().all(|v| *v == 0.0));
        let lin = PhaseMatrix::new(5, 1, (0..5).map(|w| PI * w as f64 / 2.0).collect());
        for v in fpd(&lin, 0).unwrap() {
            assert!((v - PI / 2.0).abs() < 1e-12);
        }
        assert!(matches!(
            fpd(&flat, 1),
            Err(Error::FrameOutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn fpd_tpd_match_scalar_loops() {
        let p = random_phases(9, 4, 11);
        for tau in 0..4 {
            let f = fpd(&p, tau).unwrap();
            assert_eq!(f.len(), 8);
            for w in 1..9 {
                assert_eq!(f[w - 1], wrap(p.get(w, tau) - p.get(w - 1, tau)));
            }
        }
        for tau in 1..4 {
            let t = tpd(&p, tau).unwrap();
            for w in 0..9 {
                assert_eq!(t[w], wrap(p.get(w, tau) - p.get(w, tau - 1)));
            }
        }
    }

    #[test]
    fn tpd_cases() {
        let same = PhaseMatrix::new(3, 2, vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
        assert!(tpd(&same, 1).unwrap().iter().all(|v| *v == 0.0));
        let c = 2.5;
        let shifted = PhaseMatrix::new(3, 2, vec![0.1, 0.2, 0.3, 0.1 + c, 0.2 + c, 0.3 + c]);
        for v in tpd(&shifted, 1).unwrap() {
            assert!((v - wrap(c)).abs() < 1e-12);
        }
        assert!(tpd(&same, 0).is_err());
    }

    #[test]
    fn bpd_cases() {
        let v = vec![0.1, -0.2, 0.3];
        assert_eq!(bpd_from_tpd(&v, 0, 2), v.iter().map(|x| wrap(*x)).collect::<Vec<_>>());
        let carrier: Vec<f64> = (0..5).map(|w| 3.0 * PI * w as f64 / 4.0).collect();
        for b in bpd_from_tpd(&carrier, 3, 4) {
            assert!(wrap(b).abs() < 1e-12);
        }
        // a = 256, L = 512: the carrier is πω/2.
        let out = bpd_from_tpd(&[0.0; 513], 256, 512);
        let expect = [0.0, -PI / 2.0, -PI, PI / 2.0, 0.0];
        for (w, e) in expect.iter().enumerate() {
            assert!((out[w] - e).abs() < 1e-12, "bin {w}");
        }
        assert!((out[511] - PI / 2.0).abs() < 1e-9);
    }

    #[test]
    fn tpd_from_bpd_cases() {
        let out = tpd_from_bpd(&[0.0; 513], 256, 512);
        for w in 0..513 {
            assert!((out[w] - wrap(PI * w as f64 / 2.0)).abs() < 1e-12);
        }
        assert!((out[1] - PI / 2.0).abs() < 1e-12);
        assert!((out[2] + PI).abs() < 1e-12);
        assert!((out[3] + PI / 2.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..513).map(|_| rng.random_range(-PI..PI)).collect();
        let back = tpd_from_bpd(&bpd_from_tpd(&v, 256, 512), 256, 512);
        for (a, b) in v.iter().zip(&back) {
            assert!(wrap(a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_polar_construction() {
        let r = complex_ratios(&[1.0; 3], &[1.0; 3], &[0.0; 2], &[0.0; 3]).unwrap();
        assert!(r.u_ratio.iter().chain(&r.v_ratio).all(|z| *z == Complex64::new(1.0, 0.0)));
        let r = complex_ratios(&[1.0, 2.0], &[2.0, 4.0], &[0.0], &[PI / 2.0; 2]).unwrap();
        for z in &r.v_ratio {
            assert!((z - Complex64::new(0.0, 2.0)).norm() < 1e-12);
        }
        assert!(complex_ratios(&[1.0; 3], &[1.0; 3], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn ratios_reproduce_true_spectrogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (bins, frames) = (17, 3);
        let y: Vec<Complex64> = (0..bins * frames)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let phases =
            PhaseMatrix::new(bins, frames, y.iter().map(|z| z.arg()).collect());
        for tau in 1..frames {
            let cur = &y[tau * bins..(tau + 1) * bins];
            let prev = &y[(tau - 1) * bins..tau * bins];
            let mc: Vec<f64> = cur.iter().map(|z| z.norm()).collect();
            let mp: Vec<f64> = prev.iter().map(|z| z.norm()).collect();
            let r = complex_ratios(&mp, &mc, &fpd(&phases, tau).unwrap(), &tpd(&phases, tau).unwrap())
                .unwrap();
            for w in 1..bins {
                let est = cur[w - 1] * r.u_ratio[w - 1];
                assert!((est - cur[w]).norm() < 1e-10 * cur[w].norm());
            }
            for w in 0..bins {
                let est = prev[w] * r.v_ratio[w];
                assert!((est - cur[w]).norm() < 1e-10 * cur[w].norm());
            }
        }
    }

    #[test]
    fn residual_rejects_hann_and_silence() {
        let hann = AnalysisConfig::new(64, 1, WindowKind::Hann, 8_000).unwrap();
        let w = Waveform::new(vec![0.5; 500], 8_000).unwrap();
        assert!(matches!(gradient_theorem_residual(&w, &hann), Err(Error::WindowKind(_))));
        let gauss = AnalysisConfig::new(64, 1, WindowKind::Gaussian { lambda: 0.02 }, 8_000).unwrap();
        let silent = Waveform::new(vec![0.0; 500], 8_000).unwrap();
        assert!(matches!(
            gradient_theorem_residual(&silent, &gauss),
            Err(Error::EmptyMask)
        ));
    }
}
