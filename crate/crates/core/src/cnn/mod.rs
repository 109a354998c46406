//! The phase-derivative network: a causal stem/body/head CNN mapping a
//! `1×F×T` log-magnitude spectrogram to FPD and BPD predictions of the same
//! shape.
//!
//! Time padding is causal everywhere (output frame `τ` sees input frames
//! `≤ τ`); frequency padding is symmetric so `F` is preserved.
//!
//! In strided mode the stem convolution is evaluated only at even frames
//! and the two output heads have two channels each. Channel 0 of the run at
//! frame `τ` holds the prediction for the skipped frame `τ−1`, channel 1 the
//! prediction for `τ` itself.

pub mod layers;
pub mod model;
pub mod weights;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{Model, StreamingCnn};
pub use weights::{count_params_and_macs, CnnWeights, CostReport, NamedTensor, TensorKind};

/// Floating-point element type for inference.
pub trait Scalar: Float + Sum + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    Strided,
}

impl Mode {
    /// Output channels of each head.
    pub fn head_channels(self) -> usize {
        match self {
            Mode::Full => 1,
            Mode::Strided => 2,
        }
    }

    pub fn stride(self) -> usize {
        match self {
            Mode::Full => 1,
            Mode::Strided => 2,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "strided" => Ok(Mode::Strided),
            other => Err(format!("unknown mode `{other}` (expected full|strided)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::Strided => "strided",
        })
    }
}

/// `C × F × T` tensor stored channel-major, then frequency, then time.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub channels: usize,
    pub freq: usize,
    pub time: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(channels: usize, freq: usize, time: usize) -> Self {
        Self {
            channels,
            freq,
            time,
            data: vec![T::zero(); channels * freq * time],
        }
    }

    pub fn from_vec(channels: usize, freq: usize, time: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * freq * time {
            return Err(Error::Shape(format!(
                "tensor data has {} values, expected {channels}x{freq}x{time}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            freq,
            time,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, c: usize, f: usize, t: usize) -> usize {
        (c * self.freq + f) * self.time + t
    }

    #[inline]
    pub fn at(&self, c: usize, f: usize, t: usize) -> T {
        self.data[self.idx(c, f, t)]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.freq * self.time;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.freq * self.time;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn row(&self, c: usize, f: usize) -> &[T] {
        let start = self.idx(c, f, 0);
        &self.data[start..start + self.time]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.freq == other.freq && self.time == other.time
    }

    /// Values of channel `c` at frame `t`, across frequency.
    pub fn column(&self, c: usize, t: usize) -> Vec<T> {
        (0..self.freq).map(|f| self.at(c, f, t)).collect()
    }

    /// Frames `range` of every channel.
    pub fn slice_time(&self, range: std::ops::Range<usize>) -> Self {
        let time = range.len();
        let mut data = Vec::with_capacity(self.channels * self.freq * time);
        for c in 0..self.channels {
            for f in 0..self.freq {
                data.extend_from_slice(&self.row(c, f)[range.clone()]);
            }
        }
        Self {
            channels: self.channels,
            freq: self.freq,
            time,
            data,
        }
    }

    /// Stacks channels of `parts` (all with equal `F`, `T`).
    pub fn concat_channels(parts: &[&Self]) -> Self {
        let (freq, time) = (parts[0].freq, parts[0].time);
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * freq * time);
        for p in parts {
            debug_assert!(p.freq == freq && p.time == time);
            data.extend_from_slice(&p.data);
        }
        Self {
            channels,
            freq,
            time,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            freq: self.freq,
            time: self.time,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor3<U> {
        Tensor3 {
            channels: self.channels,
            freq: self.freq,
            time: self.time,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Tensor3<f64> {
    /// `1 × (L+1) × T` tensor from a log-magnitude spectrogram.
    pub fn from_log_magnitude(m: &crate::stft::LogMagnitudeSpectrogram) -> Self {
        let mut t = Self::zeros(1, m.bins, m.frames);
        for tau in 0..m.frames {
            for (w, v) in m.frame(tau).iter().enumerate() {
                let i = t.idx(0, w, tau);
                t.data[i] = *v;
            }
        }
        t
    }
}
