//! Named weight tensors, the `SIW1` file format and cost accounting.
//!
//! Tensor order (kernels are `[out, in, k_f, k_t]`, `k` is 1 in full mode
//! and 2 in strided mode):
//!
//! | name | shape |
//! |------|-------|
//! | `stem.bn.{scale,shift,running_mean,running_var}` | `[1]` |
//! | `stem.conv.{weight,bias}` | `[50,1,3,4]`, `[50]` |
//! | `stem.gate_value.{weight,bias}` | `[10,50,1,1]`, `[10]` |
//! | `stem.gate_gate.{weight,bias}` | `[10,50,1,1]`, `[10]` |
//! | `body.{i}.conv.{weight,bias}`, i = 0..5 | `[10,10,1,1]`, `[10]` |
//! | `body.{i}.bn.{scale,shift,running_mean,running_var}` | `[10]` |
//! | `direct_bn.{scale,shift,running_mean,running_var}` | `[10]` |
//! | `head.value.{weight,bias}` | `[50,20,3,1]`, `[50]` |
//! | `head.gate.{weight,bias}` | `[50,20,3,1]`, `[50]` |
//! | `out_bpd.{weight,bias}` | `[k,50,1,1]`, `[k]` |
//! | `out_fpd.{weight,bias}` | `[k,50,1,1]`, `[k]` |
//!
//! In strided mode output channel 0 of each head is the skipped (older)
//! frame and channel 1 the current frame.
//!
//! File layout: magic `SIW1`, u32 LE version (1), u8 mode (0 full,
//! 1 strided), u32 LE tensor count, then per tensor a u16 LE name length,
//! the UTF-8 name, a u8 rank, `rank` u32 LE dims and the f32 LE values in
//! row-major order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::layers::{BatchNorm, Conv, BN_EPSILON};
use super::{Mode, Scalar};
use crate::error::{Error, Result};

pub const STEM_CHANNELS: usize = 50;
pub const TRUNK_CHANNELS: usize = 10;
pub const HEAD_CHANNELS: usize = 50;
pub const BODY_LAYERS: usize = 5;

const MAGIC: &[u8; 4] = b"SIW1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Kernel,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl TensorKind {
    /// Running statistics are buffers, not trainable parameters.
    pub fn is_parameter(self) -> bool {
        !matches!(self, TensorKind::RunningMean | TensorKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `(name, kind, dims)` of every tensor in file order.
pub fn layout(mode: Mode) -> Vec<(String, TensorKind, Vec<usize>)> {
    let k = mode.head_channels();
    let mut out = Vec::new();
    let conv = |out: &mut Vec<_>, p: &str, o: usize, i: usize, kf: usize, kt: usize| {
        out.push((format!("{p}.weight"), TensorKind::Kernel, vec![o, i, kf, kt]));
        out.push((format!("{p}.bias"), TensorKind::Bias, vec![o]));
    };
    let bn = |out: &mut Vec<_>, p: &str, c: usize| {
        for (s, kind) in [
            ("scale", TensorKind::BnScale),
            ("shift", TensorKind::BnShift),
            ("running_mean", TensorKind::RunningMean),
            ("running_var", TensorKind::RunningVar),
        ] {
            out.push((format!("{p}.{s}"), kind, vec![c]));
        }
    };
    bn(&mut out, "stem.bn", 1);
    conv(&mut out, "stem.conv", STEM_CHANNELS, 1, 3, 4);
    conv(&mut out, "stem.gate_value", TRUNK_CHANNELS, STEM_CHANNELS, 1, 1);
    conv(&mut out, "stem.gate_gate", TRUNK_CHANNELS, STEM_CHANNELS, 1, 1);
    for i in 0..BODY_LAYERS {
        conv(&mut out, &format!("body.{i}.conv"), TRUNK_CHANNELS, TRUNK_CHANNELS, 1, 1);
        bn(&mut out, &format!("body.{i}.bn"), TRUNK_CHANNELS);
    }
    bn(&mut out, "direct_bn", TRUNK_CHANNELS);
    conv(&mut out, "head.value", HEAD_CHANNELS, 2 * TRUNK_CHANNELS, 3, 1);
    conv(&mut out, "head.gate", HEAD_CHANNELS, 2 * TRUNK_CHANNELS, 3, 1);
    conv(&mut out, "out_bpd", k, HEAD_CHANNELS, 1, 1);
    conv(&mut out, "out_fpd", k, HEAD_CHANNELS, 1, 1);
    out
}

/// Names of the convolution layers in evaluation order.
pub fn conv_names() -> Vec<String> {
    let mut v = vec![
        "stem.conv".to_string(),
        "stem.gate_value".into(),
        "stem.gate_gate".into(),
    ];
    v.extend((0..BODY_LAYERS).map(|i| format!("body.{i}.conv")));
    v.extend(["head.value", "head.gate", "out_bpd", "out_fpd"].map(String::from));
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnWeights {
    mode: Mode,
    tensors: Vec<NamedTensor>,
}

impl CnnWeights {
    /// He-uniform kernels, zero biases, BN scale 1 / shift 0, unit running
    /// variance.
    pub fn init(mode: Mode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(mode)
            .into_iter()
            .map(|(name, kind, dims)| {
                let n: usize = dims.iter().product();
                let data = match kind {
                    TensorKind::Kernel => {
                        let fan_in: usize = dims[1..].iter().product();
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    TensorKind::BnScale | TensorKind::RunningVar => vec![1.0; n],
                    _ => vec![0.0; n],
                };
                NamedTensor {
                    name,
                    kind,
                    dims,
                    data,
                }
            })
            .collect();
        Self { mode, tensors }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor `{name}`")))
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind.is_parameter())
            .map(NamedTensor::len)
            .sum()
    }

    pub fn conv<T: Scalar>(&self, prefix: &str) -> Result<Conv<T>> {
        let w = self.require(&format!("{prefix}.weight"))?;
        let b = self.require(&format!("{prefix}.bias"))?;
        let cast = |v: &[f64]| v.iter().map(|x| T::from_f64(*x)).collect::<Vec<T>>();
        Conv::new(w.dims[0], w.dims[1], w.dims[2], w.dims[3], cast(&w.data), cast(&b.data))
    }

    pub fn batch_norm<T: Scalar>(&self, prefix: &str) -> Result<BatchNorm<T>> {
        let get = |s: &str| -> Result<Vec<T>> {
            Ok(self
                .require(&format!("{prefix}.{s}"))?
                .data
                .iter()
                .map(|x| T::from_f64(*x))
                .collect())
        };
        Ok(BatchNorm {
            scale: get("scale")?,
            shift: get("shift")?,
            running_mean: get("running_mean")?,
            running_var: get("running_var")?,
            eps: BN_EPSILON,
        })
    }

    /// Writes BN parameters and running statistics back.
    pub fn set_batch_norm(&mut self, prefix: &str, bn: &BatchNorm<f64>) -> Result<()> {
        for (s, v) in [
            ("scale", &bn.scale),
            ("shift", &bn.shift),
            ("running_mean", &bn.running_mean),
            ("running_var", &bn.running_var),
        ] {
            let name = format!("{prefix}.{s}");
            let t = self
                .get_mut(&name)
                .ok_or_else(|| Error::Weights(format!("missing tensor `{name}`")))?;
            t.data.clone_from(v);
        }
        Ok(())
    }

    /// Checks names, order, shapes, finiteness and positive running variance.
    pub fn validate(&self) -> Result<()> {
        let expected = layout(self.mode);
        if expected.len() != self.tensors.len() {
            return Err(Error::Weights(format!(
                "expected {} tensors for {} mode, found {}",
                expected.len(),
                self.mode,
                self.tensors.len()
            )));
        }
        for ((name, kind, dims), t) in expected.iter().zip(&self.tensors) {
            if &t.name != name || t.kind != *kind {
                return Err(Error::Weights(format!("expected tensor `{name}`, found `{}`", t.name)));
            }
            if &t.dims != dims || t.data.len() != dims.iter().product::<usize>() {
                return Err(Error::Weights(format!(
                    "tensor `{name}` has shape {:?}, expected {dims:?}",
                    t.dims
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Weights(format!("tensor `{name}` has non-finite values")));
            }
            if *kind == TensorKind::RunningVar && t.data.iter().any(|v| *v <= 0.0) {
                return Err(Error::Weights(format!("tensor `{name}` has non-positive variance")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.mode {
            Mode::Full => 0,
            Mode::Strided => 1,
        });
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Weights("bad magic, expected SIW1".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Weights(format!("unsupported version {version}")));
        }
        let mode = match r.take(1)?[0] {
            0 => Mode::Full,
            1 => Mode::Strided,
            m => return Err(Error::Weights(format!("unknown mode byte {m}"))),
        };
        let count = r.u32()? as usize;
        let expected = layout(mode);
        if count != expected.len() {
            return Err(Error::Weights(format!(
                "expected {} tensors for {mode} mode, file has {count}",
                expected.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (ename, kind, edims) in expected {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Weights("tensor name is not UTF-8".into()))?
                .to_string();
            if name != ename {
                return Err(Error::Weights(format!("unexpected tensor `{name}` (expected `{ename}`)")));
            }
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != edims {
                return Err(Error::Weights(format!(
                    "tensor `{name}` has shape {dims:?}, expected {edims:?}"
                )));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push(NamedTensor {
                name,
                kind,
                dims,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Weights(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let w = Self { mode, tensors };
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Builds weights from tensors already in layout order.
    pub fn from_tensors(mode: Mode, tensors: Vec<NamedTensor>) -> Result<Self> {
        let w = Self { mode, tensors };
        w.validate()?;
        Ok(w)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Weights("unexpected end of weights file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs_per_frame: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub params: usize,
    pub macs_per_frame: f64,
    pub gmac_per_s: f64,
    pub layers: Vec<LayerCost>,
}

/// Parameters and MACs per evaluated frame of one convolution.
pub fn conv_cost(out_ch: usize, in_ch: usize, kf: usize, kt: usize, freq: usize) -> (usize, usize) {
    let taps = out_ch * in_ch * kf * kt;
    (taps + out_ch, taps * freq)
}

/// Convolution MACs only (BN and activations excluded). In strided mode
/// every layer is evaluated on every second frame.
pub fn count_params_and_macs(w: &CnnWeights, freq: usize, frames_per_second: f64) -> CostReport {
    let rate = 1.0 / w.mode().stride() as f64;
    let layers: Vec<LayerCost> = conv_names()
        .into_iter()
        .filter_map(|name| {
            let d = &w.get(&format!("{name}.weight"))?.dims;
            let (params, macs) = conv_cost(d[0], d[1], d[2], d[3], freq);
            Some(LayerCost {
                name,
                params,
                macs_per_frame: macs as f64 * rate,
            })
        })
        .collect();
    let macs_per_frame: f64 = layers.iter().map(|l| l.macs_per_frame).sum();
    CostReport {
        params: w.param_count(),
        macs_per_frame,
        gmac_per_s: macs_per_frame * frames_per_second / 1e9,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_cost_closed_form() {
        assert_eq!(conv_cost(10, 50, 1, 1, 513), (510, 50 * 10 * 513));
    }

    #[test]
    fn frozen_parameter_counts() {
        assert_eq!(CnnWeights::init(Mode::Full, 0).param_count(), 8544);
        assert_eq!(CnnWeights::init(Mode::Strided, 0).param_count(), 8646);
    }

    #[test]
    fn frozen_mac_counts() {
        let full = count_params_and_macs(&CnnWeights::init(Mode::Full, 0), 513, 62.5);
        assert_eq!(full.macs_per_frame, 4_206_600.0);
        let strided = count_params_and_macs(&CnnWeights::init(Mode::Strided, 0), 513, 62.5);
        assert_eq!(strided.macs_per_frame, 2_128_950.0);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = CnnWeights::init(Mode::Full, 3);
        assert_eq!(a, CnnWeights::init(Mode::Full, 3));
        assert_ne!(a, CnnWeights::init(Mode::Full, 4));
        let k = a.get("head.value.weight").unwrap();
        let bound = (6.0f64 / 60.0).sqrt();
        assert!(k.data.iter().all(|v| v.abs() <= bound));
        assert!(a.get("head.value.bias").unwrap().data.iter().all(|v| *v == 0.0));
        a.validate().unwrap();
    }

    #[test]
    fn siw1_roundtrip_at_f32() {
        let mut w = CnnWeights::init(Mode::Strided, 9);
        for t in w.tensors_mut() {
            for v in &mut t.data {
                *v = (*v as f32) as f64;
            }
        }
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"SIW1");
        assert_eq!(bytes[8], 1);
        assert_eq!(CnnWeights::from_bytes(&bytes).unwrap(), w);
    }

    #[test]
    fn loader_rejects_bad_files() {
        let w = CnnWeights::init(Mode::Full, 1);
        let good = w.to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(CnnWeights::from_bytes(&bad).is_err());
        assert!(CnnWeights::from_bytes(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(CnnWeights::from_bytes(&extra).is_err());
        let mut count = good.clone();
        count[9] = count[9].wrapping_add(1);
        assert!(CnnWeights::from_bytes(&count).is_err());
        // Rename the first tensor.
        let mut name = good.clone();
        name[15] = b'X';
        assert!(CnnWeights::from_bytes(&name).is_err());
    }

    #[test]
    fn validate_rejects_nonpositive_variance() {
        let mut w = CnnWeights::init(Mode::Full, 1);
        w.get_mut("direct_bn.running_var").unwrap().data[0] = 0.0;
        assert!(w.validate().is_err());
    }
}
