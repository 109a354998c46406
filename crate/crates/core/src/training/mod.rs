//! Supervised training of the phase-derivative network with the von Mises
//! loss, in double precision.
//!
//! Batches are a pure function of `(seed, step)`, so a run resumed from a
//! saved [`TrainState`] continues exactly as the uninterrupted run would.

pub mod graph;
pub mod optim;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::model::replicate_last_frame;
use crate::cnn::{CnnWeights, Mode, Tensor3};
use crate::error::{Error, Result};
use crate::phase::{bpd_from_tpd, fpd, tpd};
use crate::stft::{log_magnitude, stft, AnalysisConfig, ComplexSpectrogram, Waveform, WindowKind};
use crate::wav::read_wav;

pub use graph::{loss_and_gradients, LossBreakdown, PassResult};
pub use optim::{learning_rate, optimizer_step, AdamState};

pub const LOSS_CSV_HEADER: &str = "step,loss_fpd,loss_bpd,lr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub ramp_steps: usize,
    pub cycle_steps: usize,
    pub cycle_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub segment_seconds: f64,
    pub steps: usize,
    pub seed: u64,
    pub win_len: usize,
    pub hop: usize,
    pub checkpoint_every: usize,
    /// Tensor name prefixes excluded from optimization.
    pub frozen: Vec<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            peak_lr: 1e-3,
            ramp_steps: 100,
            cycle_steps: 500,
            cycle_decay: 0.97,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            segment_seconds: 1.0,
            steps: 500,
            seed: 0,
            win_len: 1024,
            hop: 256,
            checkpoint_every: 100,
            frozen: Vec::new(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("peak_lr", self.peak_lr),
            ("cycle_steps", self.cycle_steps as f64),
            ("cycle_decay", self.cycle_decay),
            ("segment_seconds", self.segment_seconds),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("weight_decay must be ≥ 0 and betas in [0, 1)".into()));
        }
        Ok(())
    }

    fn analysis(&self, sample_rate: u32) -> Result<AnalysisConfig> {
        AnalysisConfig::new(self.win_len, self.hop, WindowKind::Hann, sample_rate)
    }
}

/// One gradient vector per trainable tensor, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    entries: Vec<(String, Vec<f64>)>,
}

impl GradientSet {
    /// Zero gradients for every parameter tensor not matching `frozen`.
    pub fn zeros_like(w: &CnnWeights, frozen: &[String]) -> Self {
        let mut g = Self {
            entries: w
                .tensors()
                .iter()
                .filter(|t| t.kind.is_parameter())
                .map(|t| (t.name.clone(), vec![0.0; t.len()]))
                .collect(),
        };
        g.remove_frozen(frozen);
        g
    }

    pub fn remove_frozen(&mut self, frozen: &[String]) {
        self.entries
            .retain(|(name, _)| !frozen.iter().any(|p| name.starts_with(p.as_str())));
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter().map(|(n, g)| (n, g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

/// `−Σ cos(pred − target)` over all entries.
pub fn von_mises_loss(pred: &Tensor3<f64>, target: &Tensor3<f64>) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::Shape("prediction and target shapes differ".into()));
    }
    Ok(-pred.data.iter().zip(&target.data).map(|(p, t)| (p - t).cos()).sum::<f64>())
}

/// Frame-aligned targets (`1 × F × T`) with 0/1 masks.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    /// Row `ω ≥ 1` holds the difference between bins `ω` and `ω−1`; row 0
    /// is masked.
    pub fpd: Tensor3<f64>,
    pub fpd_mask: Tensor3<f64>,
    /// Frame 0 is masked.
    pub bpd: Tensor3<f64>,
    pub bpd_mask: Tensor3<f64>,
}

pub fn extract_targets(s: &ComplexSpectrogram) -> Result<FrameTargets> {
    let (bins, frames) = (s.bins(), s.frames());
    if frames < 2 {
        return Err(Error::Shape(format!("targets need at least 2 frames, got {frames}")));
    }
    let cfg = s.config();
    let phase = s.phases();
    let mut t = FrameTargets {
        fpd: Tensor3::zeros(1, bins, frames),
        fpd_mask: Tensor3::zeros(1, bins, frames),
        bpd: Tensor3::zeros(1, bins, frames),
        bpd_mask: Tensor3::zeros(1, bins, frames),
    };
    for tau in 0..frames {
        for (l, v) in fpd(&phase, tau)?.into_iter().enumerate() {
            let i = t.fpd.idx(0, l + 1, tau);
            t.fpd.data[i] = v;
            t.fpd_mask.data[i] = 1.0;
        }
        if tau > 0 {
            let b = bpd_from_tpd(&tpd(&phase, tau)?, cfg.hop(), cfg.half());
            for (w, v) in b.into_iter().enumerate() {
                let i = t.bpd.idx(0, w, tau);
                t.bpd.data[i] = v;
                t.bpd_mask.data[i] = 1.0;
            }
        }
    }
    Ok(t)
}

/// Network input and targets laid out like the network output: `1 × F × T`
/// in full mode, `2 × F × J` in strided mode (channel 0 the skipped frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub mode: Mode,
    pub input: Tensor3<f64>,
    pub fpd_target: Tensor3<f64>,
    pub fpd_mask: Tensor3<f64>,
    pub bpd_target: Tensor3<f64>,
    pub bpd_mask: Tensor3<f64>,
}

impl Example {
    pub fn new(input: Tensor3<f64>, targets: &FrameTargets, mode: Mode) -> Result<Self> {
        if input.channels != 1 || input.freq != targets.fpd.freq || input.time != targets.fpd.time {
            return Err(Error::Shape("input and targets disagree".into()));
        }
        match mode {
            Mode::Full => Ok(Self {
                mode,
                input,
                fpd_target: targets.fpd.clone(),
                fpd_mask: targets.fpd_mask.clone(),
                bpd_target: targets.bpd.clone(),
                bpd_mask: targets.bpd_mask.clone(),
            }),
            Mode::Strided => {
                let frames = input.time;
                let input = if frames % 2 == 0 {
                    replicate_last_frame(&input)
                } else {
                    input
                };
                let regroup = |t: &Tensor3<f64>| strided_pairs(t, frames);
                Ok(Self {
                    mode,
                    input,
                    fpd_target: regroup(&targets.fpd),
                    fpd_mask: regroup(&targets.fpd_mask),
                    bpd_target: regroup(&targets.bpd),
                    bpd_mask: regroup(&targets.bpd_mask),
                })
            }
        }
    }

    pub fn from_waveform(wave: &Waveform, analysis: &AnalysisConfig, mode: Mode) -> Result<Self> {
        let spec = stft(wave, analysis)?;
        let targets = extract_targets(&spec)?;
        Self::new(Tensor3::from_log_magnitude(&log_magnitude(&spec)), &targets, mode)
    }
}

/// `1 × F × T` → `2 × F × ⌈(T+1)/2⌉`: run `j` gets frames `2j−1` and `2j`;
/// frames outside `0..T` are zero (and therefore masked).
fn strided_pairs(t: &Tensor3<f64>, frames: usize) -> Tensor3<f64> {
    let padded = frames + usize::from(frames % 2 == 0);
    let runs = padded.div_ceil(2);
    let mut out = Tensor3::zeros(2, t.freq, runs);
    for j in 0..runs {
        for (c, tau) in [(0usize, (2 * j).checked_sub(1)), (1, Some(2 * j))] {
            let Some(tau) = tau.filter(|tau| *tau < frames) else { continue };
            for f in 0..t.freq {
                let i = out.idx(c, f, j);
                out.data[i] = t.at(0, f, tau);
            }
        }
    }
    out
}

/// Reads every `.wav` file in `dir` (sorted by name). Unreadable files are
/// skipped with a warning.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Waveform>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let mut clips = Vec::new();
    for p in paths {
        match read_wav(&p) {
            Ok(w) if !w.is_empty() => clips.push(w),
            Ok(_) => warn!("skipping empty file {}", p.display()),
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    if clips.is_empty() {
        return Err(Error::Dataset(format!("no readable WAV files in {}", dir.display())));
    }
    Ok(clips)
}

/// Segment `index` of the batch for `step`: a clip and a start offset drawn
/// from a stream keyed by `(seed, step)`.
pub fn sample_batch(clips: &[Waveform], cfg: &TrainingConfig, step: u64, mode: Mode) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let clip = &clips[rng.random_range(0..clips.len())];
        let seg = ((cfg.segment_seconds * clip.sample_rate as f64).round() as usize).max(1);
        let start = if clip.len() > seg {
            rng.random_range(0..=clip.len() - seg)
        } else {
            0
        };
        let mut samples: Vec<f64> = clip.samples[start..(start + seg).min(clip.len())].to_vec();
        samples.resize(seg, 0.0);
        let wave = Waveform::new(samples, clip.sample_rate)?;
        batch.push(Example::from_waveform(&wave, &cfg.analysis(clip.sample_rate)?, mode)?);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss_fpd: f64,
    pub loss_bpd: f64,
    pub lr: f64,
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss_fpd, self.loss_bpd, self.lr)
    }

    /// Mean per-element loss over both heads.
    pub fn mean(&self) -> f64 {
        0.5 * (self.loss_fpd + self.loss_bpd)
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainingConfig,
    pub mode: Mode,
    pub adam: AdamState,
    /// Tensor values in layout order.
    pub weights: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn cnn_weights(&self) -> Result<CnnWeights> {
        let mut w = CnnWeights::init(self.mode, 0);
        if w.tensors().len() != self.weights.len() {
            return Err(Error::Weights("state has the wrong number of tensors".into()));
        }
        for (t, v) in w.tensors_mut().iter_mut().zip(&self.weights) {
            if t.data.len() != v.len() {
                return Err(Error::Weights(format!("state tensor `{}` has the wrong size", t.name)));
            }
            t.data.clone_from(v);
        }
        w.validate()?;
        Ok(w)
    }
}

pub struct Trainer {
    cfg: TrainingConfig,
    weights: CnnWeights,
    adam: AdamState,
}

impl Trainer {
    pub fn new(cfg: TrainingConfig, mode: Mode) -> Result<Self> {
        cfg.validate()?;
        let weights = CnnWeights::init(mode, cfg.seed);
        Ok(Self {
            cfg,
            weights,
            adam: AdamState::default(),
        })
    }

    pub fn resume(state: TrainState) -> Result<Self> {
        state.config.validate()?;
        Ok(Self {
            weights: state.cnn_weights()?,
            cfg: state.config,
            adam: state.adam,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &CnnWeights {
        &self.weights
    }

    pub fn steps_done(&self) -> u64 {
        self.adam.step
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.cfg.clone(),
            mode: self.weights.mode(),
            adam: self.adam.clone(),
            weights: self.weights.tensors().iter().map(|t| t.data.clone()).collect(),
        }
    }

    pub fn step(&mut self, clips: &[Waveform]) -> Result<LossRecord> {
        let step = self.adam.step + 1;
        let batch = sample_batch(clips, &self.cfg, step, self.weights.mode())?;
        let pass = loss_and_gradients(&self.weights, &batch, &self.cfg.frozen)?;
        for (prefix, cache) in &pass.bn_stats {
            let mut bn = self.weights.batch_norm::<f64>(prefix)?;
            bn.update_running(cache);
            self.weights.set_batch_norm(prefix, &bn)?;
        }
        let lr = optimizer_step(&mut self.weights, &pass.grads, &mut self.adam, &self.cfg);
        let (loss_fpd, loss_bpd) = pass.loss.means();
        Ok(LossRecord {
            step,
            loss_fpd,
            loss_bpd,
            lr,
        })
    }
}

/// In-memory training run of `cfg.steps` steps.
pub fn train(clips: &[Waveform], cfg: &TrainingConfig, mode: Mode) -> Result<(CnnWeights, Vec<LossRecord>)> {
    if clips.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let mut trainer = Trainer::new(cfg.clone(), mode)?;
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        log.push(trainer.step(clips)?);
    }
    Ok((trainer.weights, log))
}

/// Output locations of a file-backed run.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub weights: PathBuf,
    pub loss_csv: PathBuf,
    pub state: PathBuf,
}

impl TrainOutputs {
    /// Loss log and state file next to the weights file.
    pub fn beside(weights: impl Into<PathBuf>) -> Self {
        let weights = weights.into();
        let with = |suffix: &str| {
            let mut s = weights.clone().into_os_string();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            loss_csv: with(".loss.csv"),
            state: with(".state.json"),
            weights,
        }
    }
}

/// Trains until `cfg.steps` total steps, writing the loss CSV and a
/// checkpoint (weights and state) every `checkpoint_every` steps and at
/// the end. A resumed run appends to the existing CSV.
pub fn train_to_files(
    clips: &[Waveform],
    mut trainer: Trainer,
    out: &TrainOutputs,
) -> Result<(CnnWeights, Vec<LossRecord>)> {
    let resuming = trainer.steps_done() > 0 && out.loss_csv.exists();
    let mut csv: File = if resuming {
        OpenOptions::new().append(true).open(&out.loss_csv)?
    } else {
        let mut f = File::create(&out.loss_csv)?;
        writeln!(f, "{LOSS_CSV_HEADER}")?;
        f
    };
    let total = trainer.config().steps as u64;
    let every = trainer.config().checkpoint_every.max(1) as u64;
    let mut log = Vec::new();
    while trainer.steps_done() < total {
        let rec = trainer.step(clips)?;
        writeln!(csv, "{}", rec.csv_line())?;
        if rec.step % every == 0 || rec.step == total {
            csv.flush()?;
            trainer.weights().save(&out.weights)?;
            trainer.state().save(&out.state)?;
            info!("step {}: loss_fpd {:.4} loss_bpd {:.4}", rec.step, rec.loss_fpd, rec.loss_bpd);
        }
        log.push(rec);
    }
    csv.flush()?;
    Ok((trainer.weights, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::WindowKind;

    fn tiny_cfg() -> TrainingConfig {
        TrainingConfig {
            batch_size: 2,
            segment_seconds: 0.02,
            win_len: 32,
            hop: 8,
            steps: 3,
            ramp_steps: 2,
            cycle_steps: 10,
            ..TrainingConfig::default()
        }
    }

    fn clips() -> Vec<Waveform> {
        (0..3)
            .map(|k| {
                let s = (0..800).map(|n| (0.05 * (k + 1) as f64 * n as f64).sin()).collect();
                Waveform::new(s, 16_000).unwrap()
            })
            .collect()
    }

    #[test]
    fn loss_closed_forms() {
        let t = Tensor3::from_vec(1, 10, 10, (0..100).map(|i| (i as f64 * 0.37).sin() * 3.0).collect()).unwrap();
        assert!((von_mises_loss(&t, &t).unwrap() + 100.0).abs() < 1e-12);
        let shifted = t.map(|v| v + std::f64::consts::PI);
        assert!((von_mises_loss(&shifted, &t).unwrap() - 100.0).abs() < 1e-12);
        let wrapped = t.map(|v| v + 2.0 * std::f64::consts::PI);
        assert!((von_mises_loss(&wrapped, &t).unwrap() + 100.0).abs() < 1e-12);
        assert!(von_mises_loss(&t, &Tensor3::zeros(1, 5, 20)).is_err());
    }

    #[test]
    fn mask_counts() {
        let cfg = AnalysisConfig::new(16, 4, WindowKind::Hann, 8000).unwrap();
        let w = Waveform::new((0..40).map(|n| (n as f64 * 0.3).cos()).collect(), 8000).unwrap();
        let s = stft(&w, &cfg).unwrap();
        let t = extract_targets(&s).unwrap();
        let (f, tt) = (s.bins(), s.frames());
        let fpd_masked = f * tt - t.fpd_mask.data.iter().sum::<f64>() as usize;
        let bpd_masked = f * tt - t.bpd_mask.data.iter().sum::<f64>() as usize;
        assert_eq!(fpd_masked, tt);
        assert_eq!(bpd_masked, f);
    }

    #[test]
    fn silence_targets_finite() {
        let cfg = AnalysisConfig::new(16, 4, WindowKind::Hann, 8000).unwrap();
        let s = stft(&Waveform::new(vec![0.0; 40], 8000).unwrap(), &cfg).unwrap();
        let t = extract_targets(&s).unwrap();
        assert!(t.fpd.all_finite() && t.bpd.all_finite());
        let one = stft(&Waveform::new(vec![0.0; 1], 8000).unwrap(), &cfg).unwrap();
        assert!(one.frames() >= 2);
    }

    #[test]
    fn strided_pairs_layout() {
        let t = Tensor3::from_vec(1, 1, 4, vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let p = strided_pairs(&t, 4);
        assert_eq!(p.time, 3);
        assert_eq!(p.plane(0), &[0.0, 11.0, 13.0]);
        assert_eq!(p.plane(1), &[10.0, 12.0, 0.0]);
        let t = Tensor3::from_vec(1, 1, 3, vec![10.0, 11.0, 12.0]).unwrap();
        let p = strided_pairs(&t, 3);
        assert_eq!(p.plane(0), &[0.0, 11.0]);
        assert_eq!(p.plane(1), &[10.0, 12.0]);
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let c = clips();
        let cfg = tiny_cfg();
        let a = sample_batch(&c, &cfg, 5, Mode::Full).unwrap();
        assert_eq!(a, sample_batch(&c, &cfg, 5, Mode::Full).unwrap());
        assert_ne!(a, sample_batch(&c, &cfg, 6, Mode::Full).unwrap());
    }

    #[test]
    fn frozen_tensors_absent() {
        let c = clips();
        let cfg = tiny_cfg();
        let w = CnnWeights::init(Mode::Full, 1);
        let batch = sample_batch(&c, &cfg, 1, Mode::Full).unwrap();
        let frozen = vec!["stem.".to_string()];
        let pass = loss_and_gradients(&w, &batch, &frozen).unwrap();
        assert!(pass.grads.get("stem.conv.weight").is_none());
        assert!(pass.grads.get("head.value.weight").is_some());
        assert_eq!(pass.grads.len(), GradientSet::zeros_like(&w, &[]).len() - 8);
    }

    #[test]
    fn resume_state_roundtrips() {
        let c = clips();
        let mut t = Trainer::new(tiny_cfg(), Mode::Strided).unwrap();
        t.step(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        t.state().save(&p).unwrap();
        let back = TrainState::load(&p).unwrap();
        assert_eq!(back, t.state());
        let mut r = Trainer::resume(back).unwrap();
        assert_eq!(r.step(&c).unwrap(), t.step(&c).unwrap());
    }

    #[test]
    fn empty_dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
        std::fs::write(dir.path().join("junk.wav"), b"not a wav").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
        assert!(train(&[], &tiny_cfg(), Mode::Full).is_err());
    }
}
