//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Frame `τ` is centred on sample `a·τ` and covers the `2L` samples
//! `y[aτ + l]`, `l ∈ {−L, …, L−1}`. The phase reference is the frame centre,
//! so a stationary sinusoid at bin `ω` advances by `aπω/L` per frame.
//! Samples outside the signal read as zero; the first frame is centred on
//! sample 0.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative magnitude floor applied before taking logs or ratios.
pub const MAGNITUDE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WindowKind {
    Hann,
    /// `exp(−π t² / λ)` with `t = l / (2L)`.
    Gaussian { lambda: f64 },
}

impl std::fmt::Display for WindowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WindowKind::Hann => f.write_str("hann"),
            WindowKind::Gaussian { lambda } => write!(f, "gaussian:{lambda}"),
        }
    }
}

/// Parses `hann` or `gaussian:<λ>`.
impl std::str::FromStr for WindowKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "hann" {
            return Ok(WindowKind::Hann);
        }
        match s.strip_prefix("gaussian:").map(str::parse::<f64>) {
            Some(Ok(lambda)) if lambda > 0.0 && lambda.is_finite() => Ok(WindowKind::Gaussian { lambda }),
            _ => Err(format!("unknown window `{s}` (expected hann|gaussian:<λ> with λ > 0)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    win_len: usize,
    hop: usize,
    window: WindowKind,
    sample_rate: u32,
}

impl AnalysisConfig {
    pub fn new(win_len: usize, hop: usize, window: WindowKind, sample_rate: u32) -> Result<Self> {
        if win_len == 0 || win_len % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "window length must be even and positive, got {win_len}"
            )));
        }
        if hop == 0 || hop > win_len {
            return Err(Error::InvalidConfig(format!(
                "hop must satisfy 0 < hop <= {win_len}, got {hop}"
            )));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if let WindowKind::Gaussian { lambda } = window {
            if !(lambda > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "gaussian width must be positive, got {lambda}"
                )));
            }
        }
        let cfg = Self {
            win_len,
            hop,
            window,
            sample_rate,
        };
        let min_sum = nola_min_sum(&cfg.window_samples(), hop);
        let peak = cfg
            .window_samples()
            .iter()
            .fold(0.0f64, |m, w| m.max(w * w));
        if !(min_sum > 1e-10 * peak) {
            return Err(Error::Nola { min_sum });
        }
        Ok(cfg)
    }

    /// Hann(1024, 256) at 16 kHz.
    pub fn speech_default() -> Self {
        Self::new(1024, 256, WindowKind::Hann, 16_000).expect("valid default config")
    }

    pub fn win_len(&self) -> usize {
        self.win_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// `L`, half the window length.
    pub fn half(&self) -> usize {
        self.win_len / 2
    }

    /// `L + 1` one-sided bins.
    pub fn bins(&self) -> usize {
        self.win_len / 2 + 1
    }

    pub fn window(&self) -> WindowKind {
        self.window
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn window_samples(&self) -> Vec<f64> {
        make_window(self.window, self.win_len)
    }

    /// Number of frames used to analyse `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop) + 1
    }
}

/// Minimum over offsets of the hop-shifted sum of squared window values.
fn nola_min_sum(window: &[f64], hop: usize) -> f64 {
    (0..hop)
        .map(|r| window.iter().skip(r).step_by(hop).map(|w| w * w).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Window of length `win_len`, stored so that index `n` holds `h[l]` for
/// `l = n − L` (peak at the centre index `L`).
pub fn make_window(kind: WindowKind, win_len: usize) -> Vec<f64> {
    let half = (win_len / 2) as f64;
    match kind {
        WindowKind::Hann => (0..win_len)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win_len as f64).cos())
            .collect(),
        WindowKind::Gaussian { lambda } => (0..win_len)
            .map(|n| {
                let t = (n as f64 - half) / win_len as f64;
                (-PI * t * t / lambda).exp()
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

/// One-sided complex STFT, stored frame-major: `data[τ·(L+1) + ω]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    config: AnalysisConfig,
    frames: usize,
    signal_len: usize,
    data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn from_frames(
        config: AnalysisConfig,
        frames: usize,
        signal_len: usize,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if data.len() != frames * config.bins() {
            return Err(Error::Shape(format!(
                "spectrogram data has {} entries, expected {} bins x {} frames",
                data.len(),
                config.bins(),
                frames
            )));
        }
        Ok(Self {
            config,
            frames,
            signal_len,
            data,
        })
    }

    pub fn zeros(config: AnalysisConfig, frames: usize, signal_len: usize) -> Self {
        let data = vec![Complex64::new(0.0, 0.0); frames * config.bins()];
        Self {
            config,
            frames,
            signal_len,
            data,
        }
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.config
    }

    pub fn bins(&self) -> usize {
        self.config.bins()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn frame(&self, tau: usize) -> &[Complex64] {
        let b = self.bins();
        &self.data[tau * b..(tau + 1) * b]
    }

    pub fn frame_mut(&mut self, tau: usize) -> &mut [Complex64] {
        let b = self.bins();
        &mut self.data[tau * b..(tau + 1) * b]
    }

    pub fn get(&self, bin: usize, tau: usize) -> Complex64 {
        self.data[tau * self.bins() + bin]
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, z| m.max(z.norm()))
    }

    /// Phases `Arg(Y)` in `[−π, π)`.
    pub fn phases(&self) -> crate::phase::PhaseMatrix {
        let data = self
            .data
            .iter()
            .map(|z| crate::phase::wrap(z.arg()))
            .collect();
        crate::phase::PhaseMatrix::new(self.bins(), self.frames, data)
    }
}

/// Natural-log magnitudes, frame-major like [`ComplexSpectrogram`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogMagnitudeSpectrogram {
    pub bins: usize,
    pub frames: usize,
    /// Absolute floor that was applied before the log.
    pub floor: f64,
    pub data: Vec<f64>,
}

impl LogMagnitudeSpectrogram {
    pub fn frame(&self, tau: usize) -> &[f64] {
        &self.data[tau * self.bins..(tau + 1) * self.bins]
    }

    pub fn get(&self, bin: usize, tau: usize) -> f64 {
        self.data[tau * self.bins + bin]
    }

    /// Magnitudes of frame `τ`, i.e. `exp` of the stored logs.
    pub fn magnitudes(&self, tau: usize) -> Vec<f64> {
        self.frame(tau).iter().map(|m| m.exp()).collect()
    }
}

/// Reusable FFT plans for one analysis configuration.
pub struct StftProcessor {
    config: AnalysisConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for StftProcessor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftProcessor")
            .field("config", &self.config)
            .finish()
    }
}

impl StftProcessor {
    pub fn new(config: AnalysisConfig) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(config.win_len);
        let inverse = planner.plan_fft_inverse(config.win_len);
        let window = config.window_samples();
        Self {
            config,
            window,
            forward,
            inverse,
        }
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.config
    }

    pub fn analyze(&self, wave: &Waveform) -> Result<ComplexSpectrogram> {
        if wave.is_empty() {
            return Err(Error::EmptyWaveform);
        }
        let frames = self.config.frames_for(wave.len());
        let bins = self.config.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = self.forward.make_input_vec();
        let mut spec = self.forward.make_output_vec();
        for tau in 0..frames {
            self.load_frame(&wave.samples, tau, &mut buf);
            self.forward
                .process(&mut buf, &mut spec)
                .expect("buffer sizes come from the plan");
            // Shift the phase reference from the buffer start to the frame centre.
            data.extend(
                spec.iter()
                    .enumerate()
                    .map(|(w, z)| if w % 2 == 0 { *z } else { -*z }),
            );
        }
        ComplexSpectrogram::from_frames(self.config.clone(), frames, wave.len(), data)
    }

    fn load_frame(&self, samples: &[f64], tau: usize, buf: &mut [f64]) {
        let centre = (tau * self.config.hop) as isize;
        let half = self.config.half() as isize;
        for (n, (slot, w)) in buf.iter_mut().zip(&self.window).enumerate() {
            let idx = centre + n as isize - half;
            *slot = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize] * w
            } else {
                0.0
            };
        }
    }

    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<Waveform> {
        if spec.bins() != self.config.bins() {
            return Err(Error::Shape(format!(
                "spectrogram has {} bins, processor expects {}",
                spec.bins(),
                self.config.bins()
            )));
        }
        let len = spec.signal_len();
        let hop = self.config.hop;
        let half = self.config.half() as isize;
        let scale = 1.0 / self.config.win_len as f64;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut freq = self.inverse.make_input_vec();
        let mut buf = self.inverse.make_output_vec();
        for tau in 0..spec.frames() {
            for (w, (dst, src)) in freq.iter_mut().zip(spec.frame(tau)).enumerate() {
                *dst = if w % 2 == 0 { *src } else { -*src };
            }
            freq[0].im = 0.0;
            if let Some(last) = freq.last_mut() {
                last.im = 0.0;
            }
            self.inverse
                .process(&mut freq, &mut buf)
                .expect("buffer sizes come from the plan");
            let centre = (tau * hop) as isize;
            for (n, (x, w)) in buf.iter().zip(&self.window).enumerate() {
                let idx = centre + n as isize - half;
                if idx >= 0 && (idx as usize) < len {
                    out[idx as usize] += x * scale * w;
                    norm[idx as usize] += w * w;
                }
            }
        }
        let peak = self.window.iter().fold(0.0f64, |m, w| m.max(w * w));
        for (x, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-10 * peak {
                *x /= n;
            } else {
                *x = 0.0;
            }
        }
        Waveform::new(out, self.config.sample_rate)
    }
}

pub fn stft(wave: &Waveform, config: &AnalysisConfig) -> Result<ComplexSpectrogram> {
    StftProcessor::new(config.clone()).analyze(wave)
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    StftProcessor::new(spec.config().clone()).synthesize(spec)
}

/// `ln(max(|Y|, ε·max|Y|))`; an all-zero spectrogram uses `ε` as the floor.
pub fn log_magnitude(spec: &ComplexSpectrogram) -> LogMagnitudeSpectrogram {
    let max = spec.max_magnitude();
    let floor = if max > 0.0 {
        MAGNITUDE_FLOOR * max
    } else {
        MAGNITUDE_FLOOR
    };
    let data = spec
        .data()
        .iter()
        .map(|z| z.norm().max(floor).ln())
        .collect();
    LogMagnitudeSpectrogram {
        bins: spec.bins(),
        frames: spec.frames(),
        floor,
        data,
    }
}
