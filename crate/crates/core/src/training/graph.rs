//! Training-mode forward pass with saved activations, and its reverse pass.
//!
//! Batch normalization uses batch statistics, which couples the examples of
//! a batch, so every layer is run over the whole batch before the next one.
//! Gradients are summed over examples in index order.

use crate::cnn::layers::{
    conv2d_at, conv2d_at_backward, gate, leaky_relu, leaky_relu_backward, sigmoid, strided_positions, BnCache, Conv,
};
use crate::cnn::weights::BODY_LAYERS;
use crate::cnn::{CnnWeights, Tensor3};
use crate::error::{Error, Result};

use super::{Example, GradientSet};

/// Loss totals and the number of unmasked entries per head.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub fpd: f64,
    pub bpd: f64,
    pub fpd_count: usize,
    pub bpd_count: usize,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.fpd + self.bpd
    }

    /// Per-element means `(fpd, bpd)`.
    pub fn means(&self) -> (f64, f64) {
        (
            self.fpd / self.fpd_count.max(1) as f64,
            self.bpd / self.bpd_count.max(1) as f64,
        )
    }
}

/// Outputs of one training pass.
#[derive(Debug, Clone)]
pub struct PassResult {
    pub loss: LossBreakdown,
    pub grads: GradientSet,
    /// Batch statistics per BN prefix, for the running-average update.
    pub bn_stats: Vec<(String, BnCache)>,
    /// Raw `(fpd, bpd)` head outputs per example.
    pub predictions: Vec<(Tensor3<f64>, Tensor3<f64>)>,
}

type Batch = Vec<Tensor3<f64>>;

fn check_finite(layer: &str, xs: &[Tensor3<f64>]) -> Result<()> {
    if xs.iter().all(Tensor3::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(layer.to_string()))
    }
}

fn conv_batch(xs: &[Tensor3<f64>], conv: &Conv<f64>, pos: &[Vec<usize>]) -> Result<Batch> {
    xs.iter().zip(pos).map(|(x, p)| conv2d_at(x, conv, p)).collect()
}

fn all_positions(xs: &[Tensor3<f64>]) -> Vec<Vec<usize>> {
    xs.iter().map(|x| strided_positions(x.time, 1)).collect()
}

fn add_into(acc: &mut Tensor3<f64>, other: &Tensor3<f64>) {
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

fn channels(x: &Tensor3<f64>, range: std::ops::Range<usize>) -> Tensor3<f64> {
    let n = x.freq * x.time;
    Tensor3 {
        channels: range.len(),
        freq: x.freq,
        time: x.time,
        data: x.data[range.start * n..range.end * n].to_vec(),
    }
}

/// Gradient accumulator in layout order.
struct Accum {
    grads: GradientSet,
}

impl Accum {
    fn add(&mut self, name: &str, g: &[f64]) {
        let slot = self.grads.get_mut(name).expect("gradient slot exists");
        for (a, b) in slot.iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Runs a convolution backward over the batch; returns input gradients.
    fn conv(
        &mut self,
        prefix: &str,
        conv: &Conv<f64>,
        xs: &[Tensor3<f64>],
        pos: &[Vec<usize>],
        gys: &[Tensor3<f64>],
        need_input: bool,
    ) -> Vec<Option<Tensor3<f64>>> {
        let mut out = Vec::with_capacity(xs.len());
        for ((x, p), gy) in xs.iter().zip(pos).zip(gys) {
            let g = conv2d_at_backward(x, conv, p, gy, need_input);
            self.add(&format!("{prefix}.weight"), &g.kernel);
            self.add(&format!("{prefix}.bias"), &g.bias);
            out.push(g.input);
        }
        out
    }

    fn bn(&mut self, prefix: &str, gscale: &[f64], gshift: &[f64]) {
        self.add(&format!("{prefix}.scale"), gscale);
        self.add(&format!("{prefix}.shift"), gshift);
    }
}

fn gate_backward(value: &Tensor3<f64>, gate_pre: &Tensor3<f64>, gy: &Tensor3<f64>) -> (Tensor3<f64>, Tensor3<f64>) {
    let mut gv = gy.clone();
    let mut gg = gy.clone();
    for i in 0..gy.data.len() {
        let s = sigmoid(gate_pre.data[i]);
        gv.data[i] = gy.data[i] * s;
        gg.data[i] = gy.data[i] * value.data[i] * s * (1.0 - s);
    }
    (gv, gg)
}

/// Masked von Mises loss of one head and its gradient `mask·sin(pred − target)`.
fn head_loss(pred: &Tensor3<f64>, target: &Tensor3<f64>, mask: &Tensor3<f64>) -> (f64, Tensor3<f64>) {
    let mut loss = 0.0;
    let mut grad = pred.clone();
    for i in 0..pred.data.len() {
        let d = pred.data[i] - target.data[i];
        let m = mask.data[i];
        loss -= m * d.cos();
        grad.data[i] = m * d.sin();
    }
    (loss, grad)
}

/// Summed loss over the batch and exact gradients of every parameter
/// tensor, except those whose name starts with one of `frozen`.
pub fn loss_and_gradients(w: &CnnWeights, batch: &[Example], frozen: &[String]) -> Result<PassResult> {
    if batch.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    for ex in batch {
        if ex.mode != w.mode() {
            return Err(Error::ConfigMismatch(format!(
                "example built for {} mode, weights are {}",
                ex.mode,
                w.mode()
            )));
        }
    }
    let stride = w.mode().stride();
    let inputs: Batch = batch.iter().map(|e| e.input.clone()).collect();
    let stem_pos: Vec<Vec<usize>> = inputs.iter().map(|x| strided_positions(x.time, stride)).collect();

    // Forward.
    let bn_in = w.batch_norm::<f64>("stem.bn")?;
    let (xn, c_in) = bn_in.train_forward(&inputs)?;
    let stem = w.conv::<f64>("stem.conv")?;
    let s_pre = conv_batch(&xn, &stem, &stem_pos)?;
    check_finite("stem.conv", &s_pre)?;
    let pos = all_positions(&s_pre);
    let s: Batch = s_pre.iter().map(leaky_relu).collect();
    let gv_conv = w.conv::<f64>("stem.gate_value")?;
    let gg_conv = w.conv::<f64>("stem.gate_gate")?;
    let gv = conv_batch(&s, &gv_conv, &pos)?;
    let gg = conv_batch(&s, &gg_conv, &pos)?;
    let g: Batch = gv.iter().zip(&gg).map(|(v, q)| gate(v, q)).collect();
    check_finite("stem.gate", &g)?;

    let mut body = Vec::with_capacity(BODY_LAYERS);
    let mut hs = vec![g.clone()];
    for i in 0..BODY_LAYERS {
        let conv = w.conv::<f64>(&format!("body.{i}.conv"))?;
        let bn = w.batch_norm::<f64>(&format!("body.{i}.bn"))?;
        let c = conv_batch(&hs[i], &conv, &pos)?;
        let a: Batch = c.iter().map(leaky_relu).collect();
        let (h, cache) = bn.train_forward(&a)?;
        check_finite(&format!("body.{i}"), &h)?;
        hs.push(h);
        body.push((conv, bn, c, cache));
    }
    let direct = w.batch_norm::<f64>("direct_bn")?;
    let (d, c_direct) = direct.train_forward(&g)?;
    let cat: Batch = d
        .iter()
        .zip(&hs[BODY_LAYERS])
        .map(|(a, b)| Tensor3::concat_channels(&[a, b]))
        .collect();
    let hv_conv = w.conv::<f64>("head.value")?;
    let hg_conv = w.conv::<f64>("head.gate")?;
    let hv = conv_batch(&cat, &hv_conv, &pos)?;
    let hg = conv_batch(&cat, &hg_conv, &pos)?;
    let head: Batch = hv.iter().zip(&hg).map(|(v, q)| gate(v, q)).collect();
    check_finite("head", &head)?;
    let of_conv = w.conv::<f64>("out_fpd")?;
    let ob_conv = w.conv::<f64>("out_bpd")?;
    let fpd = conv_batch(&head, &of_conv, &pos)?;
    let bpd = conv_batch(&head, &ob_conv, &pos)?;
    check_finite("out_fpd", &fpd)?;
    check_finite("out_bpd", &bpd)?;

    // Loss.
    let mut loss = LossBreakdown::default();
    let mut d_fpd = Vec::with_capacity(batch.len());
    let mut d_bpd = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let (lf, gf) = head_loss(&fpd[i], &ex.fpd_target, &ex.fpd_mask);
        let (lb, gb) = head_loss(&bpd[i], &ex.bpd_target, &ex.bpd_mask);
        loss.fpd += lf;
        loss.bpd += lb;
        loss.fpd_count += ex.fpd_mask.data.iter().filter(|m| **m != 0.0).count();
        loss.bpd_count += ex.bpd_mask.data.iter().filter(|m| **m != 0.0).count();
        d_fpd.push(gf);
        d_bpd.push(gb);
    }

    // Backward.
    let mut acc = Accum {
        grads: GradientSet::zeros_like(w, &[]),
    };
    let gh_f = acc.conv("out_fpd", &of_conv, &head, &pos, &d_fpd, true);
    let gh_b = acc.conv("out_bpd", &ob_conv, &head, &pos, &d_bpd, true);
    let mut d_head: Batch = gh_f.into_iter().map(Option::unwrap).collect();
    for (a, b) in d_head.iter_mut().zip(gh_b) {
        add_into(a, &b.unwrap());
    }
    let (d_hv, d_hg): (Batch, Batch) = (0..batch.len())
        .map(|i| gate_backward(&hv[i], &hg[i], &d_head[i]))
        .unzip();
    let gc_v = acc.conv("head.value", &hv_conv, &cat, &pos, &d_hv, true);
    let gc_g = acc.conv("head.gate", &hg_conv, &cat, &pos, &d_hg, true);
    let mut d_cat: Batch = gc_v.into_iter().map(Option::unwrap).collect();
    for (a, b) in d_cat.iter_mut().zip(gc_g) {
        add_into(a, &b.unwrap());
    }
    let c2 = d_cat[0].channels;
    let d_direct: Batch = d_cat.iter().map(|x| channels(x, 0..c2 / 2)).collect();
    let mut d_h: Batch = d_cat.iter().map(|x| channels(x, c2 / 2..c2)).collect();

    let (mut d_g, gs, gb) = direct.train_backward(&c_direct, &d_direct);
    acc.bn("direct_bn", &gs, &gb);
    for i in (0..BODY_LAYERS).rev() {
        let (conv, bn, c, cache) = &body[i];
        let (d_a, gs, gb) = bn.train_backward(cache, &d_h);
        acc.bn(&format!("body.{i}.bn"), &gs, &gb);
        let d_c: Batch = c.iter().zip(&d_a).map(|(x, g)| leaky_relu_backward(x, g)).collect();
        let gi = acc.conv(&format!("body.{i}.conv"), conv, &hs[i], &pos, &d_c, true);
        d_h = gi.into_iter().map(Option::unwrap).collect();
    }
    for (a, b) in d_g.iter_mut().zip(&d_h) {
        add_into(a, b);
    }
    let (d_gv, d_gg): (Batch, Batch) = (0..batch.len())
        .map(|i| gate_backward(&gv[i], &gg[i], &d_g[i]))
        .unzip();
    let gs_v = acc.conv("stem.gate_value", &gv_conv, &s, &pos, &d_gv, true);
    let gs_g = acc.conv("stem.gate_gate", &gg_conv, &s, &pos, &d_gg, true);
    let d_s_pre: Batch = gs_v
        .into_iter()
        .zip(gs_g)
        .zip(&s_pre)
        .map(|((a, b), x)| {
            let mut a = a.unwrap();
            add_into(&mut a, &b.unwrap());
            leaky_relu_backward(x, &a)
        })
        .collect();
    let gx = acc.conv("stem.conv", &stem, &xn, &stem_pos, &d_s_pre, true);
    let d_xn: Batch = gx.into_iter().map(Option::unwrap).collect();
    let (_, gs, gb) = bn_in.train_backward(&c_in, &d_xn);
    acc.bn("stem.bn", &gs, &gb);

    let mut grads = acc.grads;
    grads.remove_frozen(frozen);
    if !grads.all_finite() {
        return Err(Error::NonFiniteActivation("gradients".into()));
    }
    let mut bn_stats = vec![("stem.bn".to_string(), c_in)];
    for (i, (_, _, _, cache)) in body.into_iter().enumerate() {
        bn_stats.push((format!("body.{i}.bn"), cache));
    }
    bn_stats.push(("direct_bn".to_string(), c_direct));
    let predictions = fpd.into_iter().zip(bpd).collect();
    Ok(PassResult {
        loss,
        grads,
        bn_stats,
        predictions,
    })
}
