//! Browser bindings for three small operations on synthetic signals:
//! an STFT round trip, phase reconstruction driven by the true phase
//! derivatives, and a random tridiagonal solve checked against the dense
//! elimination.
//!
//! Each operation is a plain Rust function returning `Result<_, String>` so
//! it can be tested natively; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use num_complex::Complex64;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specinv::bench::random_system;
use specinv::pipeline::{invert, Features, InitMode, InversionSettings};
use specinv::solver::{dense_solve_oracle, thomas_solve, TridiagonalHermitianSystem, WeightScheme};
use specinv::stft::{istft, log_magnitude, stft, AnalysisConfig, Waveform, WindowKind};
use specinv::synth;
use wasm_bindgen::prelude::*;

pub const SAMPLE_RATE: u32 = 16_000;
/// Largest system the demo hands to the dense solver.
pub const DENSE_LIMIT: usize = 2048;

/// Test signal by name: `tone`, `chirp` or `am_chirp`.
pub fn signal(name: &str, seconds: f64) -> Result<Waveform, String> {
    if !(seconds > 0.0 && seconds <= 10.0) {
        return Err(format!("duration must be in (0, 10] s, got {seconds}"));
    }
    Ok(match name {
        "tone" => synth::tone(440.0, seconds, SAMPLE_RATE, 0.5),
        "chirp" => synth::chirp(200.0, 4000.0, seconds, SAMPLE_RATE, 0.5),
        "am_chirp" => synth::am_chirp(200.0, 4000.0, seconds, SAMPLE_RATE),
        other => return Err(format!("unknown signal `{other}`")),
    })
}

fn config(win: usize, hop: usize, window: &str) -> Result<AnalysisConfig, String> {
    let kind: WindowKind = window.parse()?;
    AnalysisConfig::new(win, hop, kind, SAMPLE_RATE).map_err(|e| e.to_string())
}

/// Relative L2 error of ISTFT(STFT(x)).
pub fn roundtrip_error(name: &str, seconds: f64, win: usize, hop: usize, window: &str) -> Result<f64, String> {
    let x = signal(name, seconds)?;
    let cfg = config(win, hop, window)?;
    let y = stft(&x, &cfg).and_then(|s| istft(&s)).map_err(|e| e.to_string())?;
    let num: f64 = x.samples.iter().zip(&y.samples).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = x.samples.iter().map(|a| a * a).sum();
    Ok((num / den).sqrt())
}

/// Result of [`reconstruct`].
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Reconstruction {
    lsc_db: f64,
    frames: usize,
    max_residual: f64,
    original: Vec<f32>,
    estimate: Vec<f32>,
}

#[wasm_bindgen]
impl Reconstruction {
    #[wasm_bindgen(getter)]
    pub fn lsc_db(&self) -> f64 {
        self.lsc_db
    }

    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[wasm_bindgen(getter)]
    pub fn max_residual(&self) -> f64 {
        self.max_residual
    }

    pub fn original(&self) -> Vec<f32> {
        self.original.clone()
    }

    pub fn estimate(&self) -> Vec<f32> {
        self.estimate.clone()
    }
}

/// Rebuilds the signal from its magnitudes using its own phase derivatives
/// as features. `init` is `zeros`, `random:<seed>` or `oracle`; `scheme`
/// names the solver weights.
pub fn reconstruct(
    name: &str,
    seconds: f64,
    win: usize,
    hop: usize,
    init: &str,
    scheme: &str,
) -> Result<Reconstruction, String> {
    let x = signal(name, seconds)?;
    let cfg = config(win, hop, "hann")?;
    let settings = InversionSettings {
        init: init.parse::<InitMode>()?,
        scheme: scheme.parse::<WeightScheme>()?,
    };
    let spec = stft(&x, &cfg).map_err(|e| e.to_string())?;
    let lm = log_magnitude(&spec);
    let (est, report) =
        invert(&lm, &cfg, x.len(), Features::Oracle(&spec), settings, Some(&spec)).map_err(|e| e.to_string())?;
    Ok(Reconstruction {
        lsc_db: report.lsc_db,
        frames: report.frames,
        max_residual: report.residuals.iter().fold(0.0, |m, r| m.max(*r)),
        original: x.samples.iter().map(|&v| v as f32).collect(),
        estimate: est.samples.iter().map(|&v| v as f32).collect(),
    })
}

/// Result of [`solve_random`].
#[wasm_bindgen]
#[derive(Debug, Clone, Copy)]
pub struct SolveCheck {
    /// max |A x - b| / max |b| for the Thomas solution.
    pub residual: f64,
    /// Relative difference to the dense solution; NaN when skipped.
    pub dense_error: f64,
}

fn relative_residual(sys: &TridiagonalHermitianSystem, x: &[Complex64]) -> f64 {
    let mut ax = vec![Complex64::new(0.0, 0.0); x.len()];
    sys.matvec(x, &mut ax);
    let num = ax.iter().zip(&sys.rhs).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
    let den = sys.rhs.iter().fold(0.0f64, |m, b| m.max(b.norm()));
    num / den
}

/// Solves a seeded random system of size `n`; the dense comparison runs for
/// `n <= DENSE_LIMIT`.
pub fn solve_random(n: usize, seed: u64) -> Result<SolveCheck, String> {
    if !(2..=1 << 20).contains(&n) {
        return Err(format!("size must be in [2, {}], got {n}", 1 << 20));
    }
    let sys = random_system(n, &mut ChaCha8Rng::seed_from_u64(seed));
    let x = thomas_solve(&sys).map_err(|e| e.to_string())?;
    let dense_error = if n <= DENSE_LIMIT {
        let d = dense_solve_oracle(&sys).map_err(|e| e.to_string())?;
        let num = x.iter().zip(&d).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
        num / d.iter().fold(0.0f64, |m, b| m.max(b.norm()))
    } else {
        f64::NAN
    };
    Ok(SolveCheck {
        residual: relative_residual(&sys, &x),
        dense_error,
    })
}

#[wasm_bindgen(js_name = roundtripError)]
pub fn roundtrip_error_js(name: &str, seconds: f64, win: usize, hop: usize, window: &str) -> Result<f64, JsError> {
    roundtrip_error(name, seconds, win, hop, window).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = reconstruct)]
pub fn reconstruct_js(
    name: &str,
    seconds: f64,
    win: usize,
    hop: usize,
    init: &str,
    scheme: &str,
) -> Result<Reconstruction, JsError> {
    reconstruct(name, seconds, win, hop, init, scheme).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = solveRandom)]
pub fn solve_random_js(n: usize, seed: u32) -> Result<SolveCheck, JsError> {
    solve_random(n, seed.into()).map_err(|e| JsError::new(&e))
}
