//! Inference: batch forward pass and a frame-by-frame streaming wrapper.

use super::layers::{conv2d_at, freq_gated_conv, leaky_relu, strided_positions, BatchNorm, Conv};
use super::weights::BODY_LAYERS;
use super::{CnnWeights, Mode, Scalar, Tensor3};
use crate::error::{Error, Result};

/// Raw (unwrapped) head outputs, each `1 × F × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub fpd: Tensor3<T>,
    pub bpd: Tensor3<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    mode: Mode,
    bn_in: BatchNorm<T>,
    stem: Conv<T>,
    gate_value: Conv<T>,
    gate_gate: Conv<T>,
    body: Vec<(Conv<T>, BatchNorm<T>)>,
    direct_bn: BatchNorm<T>,
    head_value: Conv<T>,
    head_gate: Conv<T>,
    out_bpd: Conv<T>,
    out_fpd: Conv<T>,
}

impl<T: Scalar> Model<T> {
    pub fn from_weights(w: &CnnWeights) -> Result<Self> {
        w.validate()?;
        Ok(Self {
            mode: w.mode(),
            bn_in: w.batch_norm("stem.bn")?,
            stem: w.conv("stem.conv")?,
            gate_value: w.conv("stem.gate_value")?,
            gate_gate: w.conv("stem.gate_gate")?,
            body: (0..BODY_LAYERS)
                .map(|i| Ok((w.conv(&format!("body.{i}.conv"))?, w.batch_norm(&format!("body.{i}.bn"))?)))
                .collect::<Result<_>>()?,
            direct_bn: w.batch_norm("direct_bn")?,
            head_value: w.conv("head.value")?,
            head_gate: w.conv("head.gate")?,
            out_bpd: w.conv("out_bpd")?,
            out_fpd: w.conv("out_fpd")?,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Rejects `requested` when it differs from the weights' mode.
    pub fn check_mode(&self, requested: Mode) -> Result<()> {
        if requested != self.mode {
            return Err(Error::ConfigMismatch(format!(
                "weights are for {} mode, {requested} requested",
                self.mode
            )));
        }
        Ok(())
    }

    /// Stem convolution output (before activation) at `positions` of the
    /// normalized input.
    fn stem_at(&self, x: &Tensor3<T>, positions: &[usize]) -> Result<Tensor3<T>> {
        let xn = self.bn_in.infer(x)?;
        conv2d_at(&xn, &self.stem, positions)
    }

    /// Everything after the stem convolution. All of these layers are
    /// frame-local, so they can run on any subset of frames.
    fn trunk(&self, s: &Tensor3<T>) -> Result<(Tensor3<T>, Tensor3<T>)> {
        let all = strided_positions(s.time, 1);
        let s = leaky_relu(s);
        let g = freq_gated_conv(&s, &self.gate_value, &self.gate_gate, &all)?;
        let mut h = g.clone();
        for (conv, bn) in &self.body {
            h = bn.infer(&leaky_relu(&conv2d_at(&h, conv, &all)?))?;
        }
        let d = self.direct_bn.infer(&g)?;
        let c = Tensor3::concat_channels(&[&d, &h]);
        let head = freq_gated_conv(&c, &self.head_value, &self.head_gate, &all)?;
        let fpd = conv2d_at(&head, &self.out_fpd, &all)?;
        let bpd = conv2d_at(&head, &self.out_bpd, &all)?;
        if !fpd.all_finite() || !bpd.all_finite() {
            return Err(Error::NonFiniteActivation("output heads".into()));
        }
        Ok((fpd, bpd))
    }

    fn check_input(x: &Tensor3<T>) -> Result<()> {
        if x.channels != 1 || x.freq == 0 || x.time == 0 {
            return Err(Error::Shape(format!(
                "network input must be 1xFxT with F, T > 0, got {}x{}x{}",
                x.channels, x.freq, x.time
            )));
        }
        Ok(())
    }

    /// Batch forward pass with look-ahead enabled in strided mode.
    pub fn forward(&self, x: &Tensor3<T>) -> Result<Prediction<T>> {
        self.forward_with_lookahead(x, true)
    }

    /// In strided mode without look-ahead the skipped-frame channel is
    /// discarded and each odd frame reuses the previous run's current-frame
    /// prediction.
    pub fn forward_with_lookahead(&self, x: &Tensor3<T>, lookahead: bool) -> Result<Prediction<T>> {
        Self::check_input(x)?;
        let t = x.time;
        match self.mode {
            Mode::Full => {
                let s = self.stem_at(x, &strided_positions(t, 1))?;
                let (fpd, bpd) = self.trunk(&s)?;
                Ok(Prediction { fpd, bpd })
            }
            Mode::Strided => {
                let padded;
                let x = if lookahead && t % 2 == 0 {
                    padded = replicate_last_frame(x);
                    &padded
                } else {
                    x
                };
                let s = self.stem_at(x, &strided_positions(x.time, 2))?;
                let (fpd, bpd) = self.trunk(&s)?;
                Ok(Prediction {
                    fpd: interleave(&fpd, t, lookahead),
                    bpd: interleave(&bpd, t, lookahead),
                })
            }
        }
    }
}

/// Appends a copy of the final frame.
pub fn replicate_last_frame<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    let time = x.time + 1;
    let mut data = Vec::with_capacity(x.channels * x.freq * time);
    for c in 0..x.channels {
        for f in 0..x.freq {
            let row = x.row(c, f);
            data.extend_from_slice(row);
            data.push(row[row.len() - 1]);
        }
    }
    Tensor3 {
        channels: x.channels,
        freq: x.freq,
        time,
        data,
    }
}

/// Maps two-channel strided outputs (one column per run at frame `2j`) to
/// `frames` single-channel frames.
pub fn interleave<T: Scalar>(y: &Tensor3<T>, frames: usize, lookahead: bool) -> Tensor3<T> {
    let mut out = Tensor3::zeros(1, y.freq, frames);
    for tau in 0..frames {
        let (c, j) = source_of(tau, lookahead);
        for f in 0..y.freq {
            let i = out.idx(0, f, tau);
            out.data[i] = y.at(c, f, j);
        }
    }
    out
}

/// `(channel, run)` that provides output frame `tau` in strided mode.
pub fn source_of(tau: usize, lookahead: bool) -> (usize, usize) {
    if tau % 2 == 0 {
        (1, tau / 2)
    } else if lookahead {
        (0, tau.div_ceil(2))
    } else {
        (1, tau / 2)
    }
}

/// One emitted output frame (raw head values across frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput<T> {
    pub frame: usize,
    pub fpd: Vec<T>,
    pub bpd: Vec<T>,
}

/// Frame-by-frame inference whose outputs are bit-identical to
/// [`Model::forward_with_lookahead`].
#[derive(Debug, Clone)]
pub struct StreamingCnn<T> {
    model: Model<T>,
    lookahead: bool,
    history: Vec<Vec<T>>,
    pushed: usize,
    last_current: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> StreamingCnn<T> {
    pub fn new(model: Model<T>, lookahead: bool) -> Self {
        Self {
            model,
            lookahead,
            history: Vec::new(),
            pushed: 0,
            last_current: None,
        }
    }

    pub fn frames_pushed(&self) -> usize {
        self.pushed
    }

    /// Runs the network on the newest frame of the history.
    fn run(&self) -> Result<(Tensor3<T>, Tensor3<T>)> {
        let freq = self.history[0].len();
        let w = self.history.len();
        let mut x = Tensor3::zeros(1, freq, w);
        for (t, col) in self.history.iter().enumerate() {
            for (f, v) in col.iter().enumerate() {
                let i = x.idx(0, f, t);
                x.data[i] = *v;
            }
        }
        let s = self.model.stem_at(&x, &[w - 1])?;
        self.model.trunk(&s)
    }

    /// Feeds one log-magnitude frame; returns the frames that become ready.
    pub fn push(&mut self, frame: &[T]) -> Result<Vec<StreamOutput<T>>> {
        if frame.is_empty() || self.history.first().is_some_and(|h| h.len() != frame.len()) {
            return Err(Error::Shape(format!("stream frame has {} bins", frame.len())));
        }
        let kt = self.model.stem.kt;
        if self.history.len() == kt {
            self.history.remove(0);
        }
        self.history.push(frame.to_vec());
        let tau = self.pushed;
        self.pushed += 1;
        let col = |t: &Tensor3<T>, c: usize| t.column(c, 0);
        match self.model.mode {
            Mode::Full => {
                let (fpd, bpd) = self.run()?;
                Ok(vec![StreamOutput {
                    frame: tau,
                    fpd: col(&fpd, 0),
                    bpd: col(&bpd, 0),
                }])
            }
            Mode::Strided if tau % 2 == 0 => {
                let (fpd, bpd) = self.run()?;
                let mut out = Vec::new();
                if self.lookahead && tau > 0 {
                    out.push(StreamOutput {
                        frame: tau - 1,
                        fpd: col(&fpd, 0),
                        bpd: col(&bpd, 0),
                    });
                }
                let cur = (col(&fpd, 1), col(&bpd, 1));
                out.push(StreamOutput {
                    frame: tau,
                    fpd: cur.0.clone(),
                    bpd: cur.1.clone(),
                });
                self.last_current = Some(cur);
                Ok(out)
            }
            Mode::Strided => {
                if self.lookahead {
                    return Ok(Vec::new());
                }
                let (fpd, bpd) = self.last_current.clone().expect("odd frame follows a run");
                Ok(vec![StreamOutput { frame: tau, fpd, bpd }])
            }
        }
    }

    /// Flushes a pending skipped frame at the end of the stream by
    /// repeating the last input frame.
    pub fn finish(&mut self) -> Result<Vec<StreamOutput<T>>> {
        if self.model.mode == Mode::Strided && self.lookahead && self.pushed % 2 == 0 && self.pushed > 0 {
            let last = self.history.last().cloned().expect("history is non-empty");
            let mut out = self.push(&last)?;
            out.retain(|o| o.frame < self.pushed - 1);
            self.pushed -= 1;
            return Ok(out);
        }
        Ok(Vec::new())
    }
}
