//! Online inversion: per frame, phase-derivative features → complex ratios
//! → tridiagonal solve → phase of the solution with the given magnitude.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::cnn::model::StreamOutput;
use crate::cnn::{Model, StreamingCnn, Tensor3};
use crate::error::{Error, Result};
use crate::phase::{bpd_from_tpd, complex_ratios, fpd, tpd, tpd_from_bpd, wrap};
use crate::solver::{build_system, thomas_solve_into, TridiagonalHermitianSystem, WeightScheme};
use crate::stft::{istft, stft, AnalysisConfig, ComplexSpectrogram, LogMagnitudeSpectrogram, Waveform};

/// LSC values below this are reported as this.
pub const LSC_FLOOR_DB: f64 = -120.0;

/// Phase of frame 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    #[default]
    Zeros,
    /// Uniform in `[−π, π)` from the given seed.
    Random(u64),
    /// True phase of the reference spectrogram.
    Oracle,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitMode::Zeros => f.write_str("zeros"),
            InitMode::Random(s) => write!(f, "random:{s}"),
            InitMode::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "zeros" => Ok(InitMode::Zeros),
            "oracle" => Ok(InitMode::Oracle),
            _ => match s.strip_prefix("random:").map(str::parse::<u64>) {
                Some(Ok(seed)) => Ok(InitMode::Random(seed)),
                _ => Err(format!("unknown init `{s}` (expected zeros|random:<seed>|oracle)")),
            },
        }
    }
}

impl Serialize for InitMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Recursion state: the previous frame's estimate and the next frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub prev_frame: Vec<Complex64>,
    pub frame_index: usize,
    pub init: InitMode,
    hop: usize,
    half: usize,
    scheme: WeightScheme,
    scratch: Vec<Complex64>,
    solution: Vec<Complex64>,
}

/// One solved frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub frame: Vec<Complex64>,
    /// `‖Az − b‖∞ / (‖A‖∞‖z‖∞ + ‖b‖∞)`.
    pub residual: f64,
}

fn relative_residual(sys: &TridiagonalHermitianSystem, z: &[Complex64]) -> f64 {
    let mut az = vec![Complex64::new(0.0, 0.0); z.len()];
    sys.matvec(z, &mut az);
    let num = az.iter().zip(&sys.rhs).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let zn = z.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let bn = sys.rhs.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let den = sys.inf_norm() * zn + bn;
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl StreamState {
    /// Frame-0 estimate from `mag0` and the init mode; `oracle0` is the true
    /// frame 0, required for [`InitMode::Oracle`].
    pub fn start(
        mag0: &[f64],
        init: InitMode,
        oracle0: Option<&[Complex64]>,
        config: &AnalysisConfig,
        scheme: WeightScheme,
    ) -> Result<(Self, Vec<Complex64>)> {
        if mag0.len() != config.bins() {
            return Err(Error::Shape(format!("frame has {} bins, expected {}", mag0.len(), config.bins())));
        }
        let frame: Vec<Complex64> = match init {
            InitMode::Zeros => mag0.iter().map(|m| Complex64::new(*m, 0.0)).collect(),
            InitMode::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                mag0.iter()
                    .map(|m| Complex64::from_polar(*m, rng.random_range(-PI..PI)))
                    .collect()
            }
            InitMode::Oracle => {
                let truth = oracle0.ok_or_else(|| {
                    Error::ConfigMismatch("oracle init needs a reference spectrogram".into())
                })?;
                mag0.iter()
                    .zip(truth)
                    .map(|(m, z)| Complex64::from_polar(*m, z.arg()))
                    .collect()
            }
        };
        let n = frame.len();
        Ok((
            Self {
                prev_frame: frame.clone(),
                frame_index: 1,
                init,
                hop: config.hop(),
                half: config.half(),
                scheme,
                scratch: vec![Complex64::new(0.0, 0.0); n],
                solution: vec![Complex64::new(0.0, 0.0); n],
            },
            frame,
        ))
    }

    /// Solves the next frame from its magnitude and (wrapped) features.
    pub fn step(&mut self, mag_cur: &[f64], fpd_hat: &[f64], bpd_hat: &[f64]) -> Result<StepOutput> {
        let frame = self.frame_index;
        let wrap_err = |e: Error| Error::FrameSolve {
            frame,
            source: Box::new(e),
        };
        let mag_prev: Vec<f64> = self.prev_frame.iter().map(|z| z.norm()).collect();
        let tpd_hat = tpd_from_bpd(bpd_hat, self.hop, self.half);
        let ratios = complex_ratios(&mag_prev, mag_cur, fpd_hat, &tpd_hat).map_err(wrap_err)?;
        let weights = self.scheme.weights(&mag_prev, mag_cur);
        let sys = build_system(&ratios, &self.prev_frame, &weights).map_err(wrap_err)?;
        thomas_solve_into(&sys, &mut self.scratch, &mut self.solution).map_err(wrap_err)?;
        let residual = relative_residual(&sys, &self.solution);
        let out: Vec<Complex64> = mag_cur
            .iter()
            .zip(&self.solution)
            .map(|(m, z)| Complex64::from_polar(*m, z.arg()))
            .collect();
        self.prev_frame.clone_from(&out);
        self.frame_index += 1;
        Ok(StepOutput { frame: out, residual })
    }
}

/// Where the per-frame features come from.
#[derive(Clone, Copy)]
pub enum Features<'a> {
    Cnn { model: &'a Model<f64>, lookahead: bool },
    /// Ground truth from a reference spectrogram.
    Oracle(&'a ComplexSpectrogram),
}

impl Features<'_> {
    fn name(&self) -> String {
        match self {
            Features::Cnn { model, .. } => model.mode().to_string(),
            Features::Oracle(_) => "oracle".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InversionSettings {
    pub init: InitMode,
    pub scheme: WeightScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    pub win_len: usize,
    pub hop: usize,
    pub window: crate::stft::WindowKind,
    pub sample_rate: u32,
    pub scheme: WeightScheme,
    pub lookahead: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InversionReport {
    pub lsc_db: f64,
    pub frames: usize,
    pub mode: String,
    pub init: InitMode,
    pub config: ReportConfig,
    pub residuals: Vec<f64>,
}

impl InversionReport {
    /// Summary JSON without the per-frame residual vector.
    pub fn summary_json(&self) -> serde_json::Value {
        let max_res = self.residuals.iter().copied().fold(0.0, f64::max);
        serde_json::json!({
            "lsc_db": self.lsc_db,
            "frames": self.frames,
            "mode": self.mode,
            "init": self.init.to_string(),
            "config": self.config,
            "max_residual": max_res,
        })
    }
}

/// Wrapped feature columns for frame `tau`: FPD (length L, from bins 1..=L)
/// and BPD (length L+1).
fn cnn_columns(fpd_t: &Tensor3<f64>, bpd_t: &Tensor3<f64>, tau: usize) -> (Vec<f64>, Vec<f64>) {
    let f: Vec<f64> = (1..fpd_t.freq).map(|w| wrap(fpd_t.at(0, w, tau))).collect();
    let b: Vec<f64> = (0..bpd_t.freq).map(|w| wrap(bpd_t.at(0, w, tau))).collect();
    (f, b)
}

fn oracle_columns(spec: &ComplexSpectrogram, tau: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let phase = spec.phases();
    let cfg = spec.config();
    Ok((fpd(&phase, tau)?, bpd_from_tpd(&tpd(&phase, tau)?, cfg.hop(), cfg.half())))
}

fn check_geometry(log_mag: &LogMagnitudeSpectrogram, config: &AnalysisConfig) -> Result<()> {
    if log_mag.bins != config.bins() {
        return Err(Error::ConfigMismatch(format!(
            "spectrogram has {} bins, config implies {}",
            log_mag.bins,
            config.bins()
        )));
    }
    if log_mag.frames == 0 {
        return Err(Error::EmptyWaveform);
    }
    Ok(())
}

/// Complex frames estimated from a log-magnitude spectrogram, plus the
/// per-frame solver residuals. `reference` supplies frame 0 for
/// [`InitMode::Oracle`]; oracle features imply it.
pub fn reconstruct_spectrogram(
    log_mag: &LogMagnitudeSpectrogram,
    config: &AnalysisConfig,
    signal_len: usize,
    features: Features<'_>,
    settings: InversionSettings,
    reference: Option<&ComplexSpectrogram>,
) -> Result<(ComplexSpectrogram, Vec<f64>)> {
    check_geometry(log_mag, config)?;
    let oracle = match features {
        Features::Oracle(s) => Some(s),
        Features::Cnn { .. } => None,
    };
    if let Some(s) = oracle {
        if s.bins() != log_mag.bins || s.frames() != log_mag.frames {
            return Err(Error::ConfigMismatch("oracle spectrogram geometry differs".into()));
        }
    }
    let cnn_out = match features {
        Features::Cnn { model, lookahead } => {
            let p = model.forward_with_lookahead(&Tensor3::from_log_magnitude(log_mag), lookahead)?;
            Some((p.fpd, p.bpd))
        }
        Features::Oracle(_) => None,
    };
    let oracle_init = match settings.init {
        InitMode::Oracle => reference.or(oracle).map(|s| s.frame(0)),
        _ => None,
    };
    let (mut state, frame0) =
        StreamState::start(&log_mag.magnitudes(0), settings.init, oracle_init, config, settings.scheme)?;
    let mut out = ComplexSpectrogram::zeros(config.clone(), log_mag.frames, signal_len);
    out.frame_mut(0).copy_from_slice(&frame0);
    let mut residuals = Vec::with_capacity(log_mag.frames.saturating_sub(1));
    for tau in 1..log_mag.frames {
        let (f, b) = match (&cnn_out, oracle) {
            (Some((fp, bp)), _) => cnn_columns(fp, bp, tau),
            (None, Some(s)) => oracle_columns(s, tau)?,
            (None, None) => unreachable!("features are either CNN or oracle"),
        };
        let step = state.step(&log_mag.magnitudes(tau), &f, &b)?;
        out.frame_mut(tau).copy_from_slice(&step.frame);
        residuals.push(step.residual);
    }
    Ok((out, residuals))
}

/// Offline inversion of a log-magnitude spectrogram. `signal_len` is the
/// length of the waveform to synthesize.
pub fn invert(
    log_mag: &LogMagnitudeSpectrogram,
    config: &AnalysisConfig,
    signal_len: usize,
    features: Features<'_>,
    settings: InversionSettings,
    reference: Option<&ComplexSpectrogram>,
) -> Result<(Waveform, InversionReport)> {
    let (out, residuals) = reconstruct_spectrogram(log_mag, config, signal_len, features, settings, reference)?;
    let wave = istft(&out)?;
    let lsc_db = lsc_from_log_magnitude(log_mag, &wave, config)?;
    let lookahead = matches!(features, Features::Cnn { lookahead: true, .. });
    let report = InversionReport {
        lsc_db,
        frames: log_mag.frames,
        mode: features.name(),
        init: settings.init,
        config: ReportConfig {
            win_len: config.win_len(),
            hop: config.hop(),
            window: config.window(),
            sample_rate: config.sample_rate(),
            scheme: settings.scheme,
            lookahead,
        },
        residuals,
    };
    Ok((wave, report))
}

/// Frame-by-frame inverter driven by a [`StreamingCnn`]. Emits complex
/// frames in order; in strided mode with look-ahead, frames arrive in pairs.
pub struct StreamingInverter {
    cnn: StreamingCnn<f64>,
    config: AnalysisConfig,
    settings: InversionSettings,
    state: Option<StreamState>,
    mags: Vec<Vec<f64>>,
    next: usize,
}

impl StreamingInverter {
    pub fn new(model: Model<f64>, lookahead: bool, config: AnalysisConfig, settings: InversionSettings) -> Result<Self> {
        if settings.init == InitMode::Oracle {
            return Err(Error::ConfigMismatch("oracle init is not available when streaming".into()));
        }
        Ok(Self {
            cnn: StreamingCnn::new(model, lookahead),
            config,
            settings,
            state: None,
            mags: Vec::new(),
            next: 0,
        })
    }

    fn consume(&mut self, outs: Vec<StreamOutput<f64>>) -> Result<Vec<(usize, Vec<Complex64>)>> {
        let mut ready = Vec::new();
        for o in outs {
            debug_assert_eq!(o.frame, self.next);
            let mag = &self.mags[o.frame];
            let frame = if o.frame == 0 {
                let (st, f0) = StreamState::start(mag, self.settings.init, None, &self.config, self.settings.scheme)?;
                self.state = Some(st);
                f0
            } else {
                let f: Vec<f64> = o.fpd[1..].iter().map(|v| wrap(*v)).collect();
                let b: Vec<f64> = o.bpd.iter().map(|v| wrap(*v)).collect();
                let st = self.state.as_mut().expect("frame 0 starts the state");
                st.step(mag, &f, &b)?.frame
            };
            ready.push((o.frame, frame));
            self.next += 1;
        }
        Ok(ready)
    }

    /// Feeds one log-magnitude frame.
    pub fn push(&mut self, log_mag_frame: &[f64]) -> Result<Vec<(usize, Vec<Complex64>)>> {
        if log_mag_frame.len() != self.config.bins() {
            return Err(Error::Shape(format!(
                "frame has {} bins, expected {}",
                log_mag_frame.len(),
                self.config.bins()
            )));
        }
        self.mags.push(log_mag_frame.iter().map(|v| v.exp()).collect());
        let outs = self.cnn.push(log_mag_frame)?;
        self.consume(outs)
    }

    pub fn finish(&mut self) -> Result<Vec<(usize, Vec<Complex64>)>> {
        let outs = self.cnn.finish()?;
        self.consume(outs)
    }
}

/// `20·log10(‖|STFT(est)| − |ref|‖_F / ‖|ref|‖_F)`, capped below at −120 dB.
/// `est` is truncated or zero-padded to the reference length; a length
/// difference of more than one hop is a configuration mismatch.
pub fn lsc(reference: &ComplexSpectrogram, est: &Waveform) -> Result<f64> {
    let mags: Vec<f64> = reference.data().iter().map(|z| z.norm()).collect();
    lsc_magnitudes(&mags, reference.frames(), reference.signal_len(), est, reference.config())
}

fn lsc_from_log_magnitude(log_mag: &LogMagnitudeSpectrogram, est: &Waveform, config: &AnalysisConfig) -> Result<f64> {
    let mags: Vec<f64> = log_mag.data.iter().map(|v| v.exp()).collect();
    let len = est.len();
    lsc_magnitudes(&mags, log_mag.frames, len, est, config)
}

fn lsc_magnitudes(
    ref_mags: &[f64],
    frames: usize,
    ref_len: usize,
    est: &Waveform,
    config: &AnalysisConfig,
) -> Result<f64> {
    if est.len().abs_diff(ref_len) > config.hop() {
        return Err(Error::ConfigMismatch(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            ref_len
        )));
    }
    let mut samples = est.samples.clone();
    samples.resize(ref_len.max(1), 0.0);
    let est_spec = stft(&Waveform::new(samples, est.sample_rate)?, config)?;
    if est_spec.frames() != frames {
        return Err(Error::ConfigMismatch("frame counts differ".into()));
    }
    let den: f64 = ref_mags.iter().map(|m| m * m).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = est_spec
        .data()
        .iter()
        .zip(ref_mags)
        .map(|(z, r)| (z.norm() - r).powi(2))
        .sum::<f64>()
        .sqrt();
    if num == 0.0 {
        return Ok(LSC_FLOOR_DB);
    }
    Ok((20.0 * (num / den).log10()).max(LSC_FLOOR_DB))
}
