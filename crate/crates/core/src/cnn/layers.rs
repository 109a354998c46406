//! Layer primitives and their gradients.
//!
//! Convolutions are evaluated at an explicit list of input frame positions:
//! output frame `k` reads input frames `positions[k] − (k_t − 1) ..=
//! positions[k]`. Taps that fall before frame 0 or past the last frame are
//! skipped, which is the same as causal zero padding. Every output element
//! accumulates its taps in the same order regardless of how many frames are
//! evaluated, so partial (streaming) evaluation is bit-identical to a full
//! pass.

use crate::error::{Error, Result};

use super::{Scalar, Tensor3};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 2-D convolution over (frequency, time) with kernel layout
/// `[out, in, k_f, k_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kf: usize,
    pub kt: usize,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn new(out_ch: usize, in_ch: usize, kf: usize, kt: usize, kernel: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if kf % 2 == 0 {
            return Err(Error::Shape(format!("frequency kernel size must be odd, got {kf}")));
        }
        if kernel.len() != out_ch * in_ch * kf * kt || bias.len() != out_ch {
            return Err(Error::Shape(format!(
                "conv {out_ch}x{in_ch}x{kf}x{kt}: kernel {} bias {}",
                kernel.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_ch,
            in_ch,
            kf,
            kt,
            kernel,
            bias,
        })
    }

    #[inline]
    fn w(&self, o: usize, i: usize, df: usize, dt: usize) -> T {
        self.kernel[((o * self.in_ch + i) * self.kf + df) * self.kt + dt]
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<()> {
        if x.channels != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch, x.channels
            )));
        }
        Ok(())
    }
}

/// Input frame positions for a stride over `time` frames: `0, s, 2s, …`.
pub fn strided_positions(time: usize, stride: usize) -> Vec<usize> {
    (0..time).step_by(stride).collect()
}

fn is_identity(positions: &[usize], time: usize) -> bool {
    positions.len() == time && positions.iter().enumerate().all(|(k, p)| k == *p)
}

/// Valid output rows `f` for frequency tap `df`: source row is `f + df − pf`.
#[inline]
fn row_range(freq: usize, kf: usize, df: usize) -> (usize, usize) {
    let pf = (kf - 1) / 2;
    let lo = pf.saturating_sub(df);
    let hi = (freq + pf).saturating_sub(df).min(freq);
    (lo, hi.max(lo))
}

/// Convolution evaluated at `positions` (see module docs).
pub fn conv2d_at<T: Scalar>(x: &Tensor3<T>, conv: &Conv<T>, positions: &[usize]) -> Result<Tensor3<T>> {
    conv.check_input(x)?;
    if let Some(p) = positions.iter().find(|p| **p >= x.time) {
        return Err(Error::Shape(format!("position {p} outside {} frames", x.time)));
    }
    let (freq, time, np) = (x.freq, x.time, positions.len());
    let pf = (conv.kf - 1) / 2;
    let mut out = Tensor3::zeros(conv.out_ch, freq, np);
    let identity = is_identity(positions, time);
    for o in 0..conv.out_ch {
        let plane = out.plane_mut(o);
        plane.iter_mut().for_each(|v| *v = conv.bias[o]);
        for i in 0..conv.in_ch {
            let src = x.plane(i);
            for df in 0..conv.kf {
                let (lo, hi) = row_range(freq, conv.kf, df);
                for dt in 0..conv.kt {
                    let w = conv.w(o, i, df, dt);
                    let back = conv.kt - 1 - dt;
                    if identity {
                        if back == 0 {
                            let s0 = (lo + df - pf) * time;
                            let n = (hi - lo) * time;
                            let d = &mut plane[lo * time..hi * time];
                            for (dv, sv) in d.iter_mut().zip(&src[s0..s0 + n]) {
                                *dv = *dv + w * *sv;
                            }
                        } else if back < time {
                            for f in lo..hi {
                                let s = (f + df - pf) * time;
                                let d = &mut plane[f * time + back..(f + 1) * time];
                                for (dv, sv) in d.iter_mut().zip(&src[s..s + time - back]) {
                                    *dv = *dv + w * *sv;
                                }
                            }
                        }
                    } else {
                        for f in lo..hi {
                            let s = (f + df - pf) * time;
                            for (k, &p) in positions.iter().enumerate() {
                                if p >= back {
                                    let d = &mut plane[f * np + k];
                                    *d = *d + w * src[s + p - back];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d<T: Scalar>(x: &Tensor3<T>, conv: &Conv<T>, stride: usize) -> Result<Tensor3<T>> {
    conv2d_at(x, conv, &strided_positions(x.time, stride))
}

/// Gradients of a convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor3<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_at_backward<T: Scalar>(
    x: &Tensor3<T>,
    conv: &Conv<T>,
    positions: &[usize],
    grad_out: &Tensor3<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let (freq, time, np) = (x.freq, x.time, positions.len());
    let pf = (conv.kf - 1) / 2;
    let identity = is_identity(positions, time);
    let mut gk = vec![T::zero(); conv.kernel.len()];
    let mut gb = vec![T::zero(); conv.out_ch];
    let mut gx = need_input.then(|| Tensor3::zeros(conv.in_ch, freq, time));
    for o in 0..conv.out_ch {
        let g = grad_out.plane(o);
        gb[o] = g.iter().copied().sum();
        for i in 0..conv.in_ch {
            let src = x.plane(i);
            for df in 0..conv.kf {
                let (lo, hi) = row_range(freq, conv.kf, df);
                for dt in 0..conv.kt {
                    let widx = ((o * conv.in_ch + i) * conv.kf + df) * conv.kt + dt;
                    let w = conv.kernel[widx];
                    let back = conv.kt - 1 - dt;
                    let mut acc = T::zero();
                    if identity {
                        if back < time {
                            for f in lo..hi {
                                let s = (f + df - pf) * time;
                                let gr = &g[f * time + back..(f + 1) * time];
                                let sr = &src[s..s + time - back];
                                acc = acc + dot(gr, sr);
                                if let Some(gx) = gx.as_mut() {
                                    let dst = &mut gx.plane_mut(i)[s..s + time - back];
                                    for (d, gv) in dst.iter_mut().zip(gr) {
                                        *d = *d + w * *gv;
                                    }
                                }
                            }
                        }
                    } else {
                        for f in lo..hi {
                            let s = (f + df - pf) * time;
                            for (k, &p) in positions.iter().enumerate() {
                                if p >= back {
                                    let gv = g[f * np + k];
                                    acc = acc + gv * src[s + p - back];
                                    if let Some(gx) = gx.as_mut() {
                                        let d = &mut gx.plane_mut(i)[s + p - back];
                                        *d = *d + w * gv;
                                    }
                                }
                            }
                        }
                    }
                    gk[widx] = acc;
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    }
}

/// Dot product with eight independent partial sums (fixed order).
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] = lanes[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    lanes.iter().fold(tail, |s, v| s + *v)
}

#[inline]
pub fn leaky_relu_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        v
    } else {
        v * T::from_f64(LEAKY_SLOPE)
    }
}

pub fn leaky_relu<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    x.map(leaky_relu_scalar)
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor3<T>, grad_out: &Tensor3<T>) -> Tensor3<T> {
    let slope = T::from_f64(LEAKY_SLOPE);
    let mut g = grad_out.clone();
    for (gv, xv) in g.data.iter_mut().zip(&x.data) {
        if *xv < T::zero() {
            *gv = *gv * slope;
        }
    }
    g
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `value ⊙ σ(gate)`.
pub fn gate<T: Scalar>(value: &Tensor3<T>, gate: &Tensor3<T>) -> Tensor3<T> {
    let mut out = value.clone();
    for (o, g) in out.data.iter_mut().zip(&gate.data) {
        *o = *o * sigmoid(*g);
    }
    out
}

/// Value and sigmoid-gated paths sharing one input.
pub fn freq_gated_conv<T: Scalar>(
    x: &Tensor3<T>,
    value: &Conv<T>,
    gate_conv: &Conv<T>,
    positions: &[usize],
) -> Result<Tensor3<T>> {
    if value.out_ch != gate_conv.out_ch {
        return Err(Error::Shape(format!(
            "gated conv: value has {} channels, gate {}",
            value.out_ch, gate_conv.out_ch
        )));
    }
    let v = conv2d_at(x, value, positions)?;
    let g = conv2d_at(x, gate_conv, positions)?;
    Ok(gate(&v, &g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Inference with running statistics.
    pub fn infer(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        if x.channels != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm expects {} channels, got {}",
                self.channels(),
                x.channels
            )));
        }
        let mut out = x.clone();
        let eps = T::from_f64(self.eps);
        for c in 0..x.channels {
            let a = self.scale[c] / (self.running_var[c] + eps).sqrt();
            let b = self.shift[c] - self.running_mean[c] * a;
            out.plane_mut(c).iter_mut().for_each(|v| *v = *v * a + b);
        }
        Ok(out)
    }
}

/// Saved batch statistics for the training-mode backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<Tensor3<f64>>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchNorm<f64> {
    /// Normalizes with statistics over (batch, F, T) per channel.
    pub fn train_forward(&self, xs: &[Tensor3<f64>]) -> Result<(Vec<Tensor3<f64>>, BnCache)> {
        let ch = self.channels();
        if xs.iter().any(|x| x.channels != ch) {
            return Err(Error::Shape(format!("batchnorm expects {ch} channels")));
        }
        let count: usize = xs.iter().map(|x| x.freq * x.time).sum();
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for c in 0..ch {
            let s: f64 = xs.iter().map(|x| x.plane(c).iter().sum::<f64>()).sum();
            mean[c] = s / count as f64;
            let ss: f64 = xs
                .iter()
                .map(|x| x.plane(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>())
                .sum();
            var[c] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let mut h = x.clone();
            let mut y = x.clone();
            for c in 0..ch {
                let (m, is, g, b) = (mean[c], inv_std[c], self.scale[c], self.shift[c]);
                for (hv, yv) in h.plane_mut(c).iter_mut().zip(y.plane_mut(c).iter_mut()) {
                    *hv = (*hv - m) * is;
                    *yv = *hv * g + b;
                }
            }
            xhat.push(h);
            out.push(y);
        }
        Ok((
            out,
            BnCache {
                xhat,
                inv_std,
                mean,
                var,
                count,
            },
        ))
    }

    /// Momentum update of the running statistics (unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache) {
        let n = cache.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] =
                (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * cache.mean[c];
            self.running_var[c] =
                (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * cache.var[c] * unbias;
        }
    }

    /// Returns `(grad_input, grad_scale, grad_shift)`.
    pub fn train_backward(
        &self,
        cache: &BnCache,
        grad_out: &[Tensor3<f64>],
    ) -> (Vec<Tensor3<f64>>, Vec<f64>, Vec<f64>) {
        let ch = self.channels();
        let n = cache.count as f64;
        let mut gscale = vec![0.0; ch];
        let mut gshift = vec![0.0; ch];
        for c in 0..ch {
            for (g, h) in grad_out.iter().zip(&cache.xhat) {
                for (gv, hv) in g.plane(c).iter().zip(h.plane(c)) {
                    gshift[c] += gv;
                    gscale[c] += gv * hv;
                }
            }
        }
        let mut gin = Vec::with_capacity(grad_out.len());
        for (g, h) in grad_out.iter().zip(&cache.xhat) {
            let mut gi = g.clone();
            for c in 0..ch {
                let k = self.scale[c] * cache.inv_std[c] / n;
                let (sg, sgh) = (gshift[c], gscale[c]);
                for (d, (gv, hv)) in gi.plane_mut(c).iter_mut().zip(g.plane(c).iter().zip(h.plane(c))) {
                    *d = k * (n * gv - sg - hv * sgh);
                }
            }
            gin.push(gi);
        }
        (gin, gscale, gshift)
    }
}
