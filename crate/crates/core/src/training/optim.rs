//! Adam with decoupled weight decay, and the learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{GradientSet, TrainingConfig};
use crate::cnn::CnnWeights;

/// Linear ramp to the peak rate, then cosine cycles whose peak decays
/// geometrically per cycle. Steps count from 1.
pub fn learning_rate(cfg: &TrainingConfig, step: u64) -> f64 {
    let ramp = cfg.ramp_steps as u64;
    if step <= ramp {
        return cfg.peak_lr * step as f64 / ramp.max(1) as f64;
    }
    let k = step - ramp - 1;
    let cycle = cfg.cycle_steps.max(1) as u64;
    let phase = (k % cycle) as f64 / cycle as f64;
    let peak = cfg.peak_lr * cfg.cycle_decay.powi((k / cycle) as i32);
    peak * 0.5 * (1.0 + (PI * phase).cos())
}

/// First and second moments per parameter tensor, and the step counter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One update of every tensor present in `grads`. Returns the learning
/// rate used.
pub fn optimizer_step(w: &mut CnnWeights, grads: &GradientSet, state: &mut AdamState, cfg: &TrainingConfig) -> f64 {
    state.step += 1;
    let t = state.step;
    let lr = learning_rate(cfg, t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (name, g) in grads.iter() {
        let Some(tensor) = w.get_mut(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            let p = &mut tensor.data[i];
            *p -= lr * cfg.weight_decay * *p;
            *p -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Mode;

    fn cfg(lr: f64, wd: f64) -> TrainingConfig {
        TrainingConfig {
            peak_lr: lr,
            ramp_steps: 0,
            weight_decay: wd,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn schedule_shape() {
        let c = TrainingConfig {
            peak_lr: 1.0,
            ramp_steps: 10,
            cycle_steps: 20,
            cycle_decay: 0.5,
            ..TrainingConfig::default()
        };
        assert_eq!(learning_rate(&c, 5), 0.5);
        assert_eq!(learning_rate(&c, 10), 1.0);
        assert_eq!(learning_rate(&c, 11), 1.0);
        assert!((learning_rate(&c, 21) - 0.5).abs() < 1e-12);
        assert_eq!(learning_rate(&c, 31), 0.5);
        assert!(learning_rate(&c, 30) < 0.01);
    }

    #[test]
    fn zero_gradient_no_decay_keeps_weights() {
        let mut w = CnnWeights::init(Mode::Full, 1);
        let before = w.clone();
        let g = GradientSet::zeros_like(&w, &[]);
        let mut st = AdamState::default();
        optimizer_step(&mut w, &g, &mut st, &cfg(1e-3, 0.0));
        assert_eq!(w, before);
    }

    #[test]
    fn single_step_closed_form() {
        let mut w = CnnWeights::init(Mode::Full, 1);
        let before = w.get("out_fpd.bias").unwrap().data[0];
        let mut g = GradientSet::zeros_like(&w, &[]);
        g.get_mut("out_fpd.bias").unwrap()[0] = 1.0;
        let mut st = AdamState::default();
        let c = cfg(1e-3, 0.0);
        optimizer_step(&mut w, &g, &mut st, &c);
        let delta = w.get("out_fpd.bias").unwrap().data[0] - before;
        assert!((delta + 1e-3 / (1.0 + c.adam_eps)).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut w = CnnWeights::init(Mode::Full, 1);
        let before = w.get("head.value.weight").unwrap().data.clone();
        let g = GradientSet::zeros_like(&w, &[]);
        let mut st = AdamState::default();
        optimizer_step(&mut w, &g, &mut st, &cfg(1e-3, 0.1));
        for (a, b) in w.get("head.value.weight").unwrap().data.iter().zip(&before) {
            assert!((a - b * (1.0 - 1e-4)).abs() < 1e-15);
        }
    }
}
