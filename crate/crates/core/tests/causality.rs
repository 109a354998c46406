//! Perturbation probes on the CNN and the inversion pipeline, and
//! streaming-versus-batch equivalence.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specinv::cnn::{CnnWeights, Mode, Model, Tensor3};
use specinv::pipeline::{reconstruct_spectrogram, Features, InitMode, InversionSettings, StreamingInverter};
use specinv::solver::WeightScheme;
use specinv::stft::{log_magnitude, stft, AnalysisConfig, LogMagnitudeSpectrogram, WindowKind};
use specinv::synth::am_chirp;

const F: usize = 33;
const T: usize = 12;

fn model(mode: Mode) -> Model<f64> {
    let mut w = CnnWeights::init(mode, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in w.tensors_mut() {
        if t.kind == specinv::cnn::TensorKind::Bias {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    Model::from_weights(&w).unwrap()
}

fn input(seed: u64) -> Tensor3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::from_vec(1, F, T, (0..F * T).map(|_| rng.random_range(-8.0..0.0)).collect()).unwrap()
}

fn perturb_from(x: &Tensor3<f64>, t0: usize) -> Tensor3<f64> {
    let mut y = x.clone();
    for f in 0..F {
        for t in t0..T {
            let i = y.idx(0, f, t);
            y.data[i] += 1.0 + 0.1 * f as f64;
        }
    }
    y
}

/// First frame whose FPD or BPD output differs.
fn first_changed(m: &Model<f64>, a: &Tensor3<f64>, b: &Tensor3<f64>, lookahead: bool) -> Option<usize> {
    let pa = m.forward_with_lookahead(a, lookahead).unwrap();
    let pb = m.forward_with_lookahead(b, lookahead).unwrap();
    (0..T).find(|&t| (0..F).any(|f| pa.fpd.at(0, f, t) != pb.fpd.at(0, f, t) || pa.bpd.at(0, f, t) != pb.bpd.at(0, f, t)))
}

#[test]
fn full_mode_is_causal() {
    let m = model(Mode::Full);
    let x = input(1);
    for t0 in 0..T {
        assert_eq!(first_changed(&m, &x, &perturb_from(&x, t0), true), Some(t0), "t0 = {t0}");
    }
}

#[test]
fn strided_mode_has_one_frame_of_lookahead() {
    let m = model(Mode::Strided);
    let x = input(2);
    for t0 in 1..T {
        let expect = if t0 % 2 == 0 { t0 - 1 } else { t0 };
        assert_eq!(first_changed(&m, &x, &perturb_from(&x, t0), true), Some(expect), "t0 = {t0}");
    }
    for t0 in 1..T {
        // Without look-ahead the odd frame reuses the previous run: causal.
        let expect = if t0 % 2 == 0 { t0 } else { t0 + 1 };
        let got = first_changed(&m, &x, &perturb_from(&x, t0), false);
        assert_eq!(got, (expect < T).then_some(expect), "t0 = {t0}");
    }
}

fn speech_like() -> (LogMagnitudeSpectrogram, AnalysisConfig, usize) {
    let cfg = AnalysisConfig::new(64, 16, WindowKind::Hann, 8000).unwrap();
    let w = am_chirp(200.0, 2500.0, 0.05, 8000);
    (log_magnitude(&stft(&w, &cfg).unwrap()), cfg, w.len())
}

fn truncate(m: &LogMagnitudeSpectrogram, k: usize) -> LogMagnitudeSpectrogram {
    LogMagnitudeSpectrogram {
        bins: m.bins,
        frames: k,
        floor: m.floor,
        data: m.data[..k * m.bins].to_vec(),
    }
}

const SETTINGS: InversionSettings = InversionSettings {
    init: InitMode::Random(4),
    scheme: WeightScheme::Geometric,
};

#[test]
fn pipeline_is_causal() {
    let (lm, cfg, len) = speech_like();
    let m = model(Mode::Full);
    let feats = Features::Cnn { model: &m, lookahead: true };
    let (full, _) = reconstruct_spectrogram(&lm, &cfg, len, feats, SETTINGS, None).unwrap();
    for k in [2, 5, lm.frames - 1] {
        let (part, _) = reconstruct_spectrogram(&truncate(&lm, k), &cfg, len, feats, SETTINGS, None).unwrap();
        for t in 0..k {
            assert_eq!(part.frame(t), full.frame(t), "k = {k}, frame {t}");
        }
    }
}

fn streamed(lm: &LogMagnitudeSpectrogram, cfg: &AnalysisConfig, m: &Model<f64>, lookahead: bool) -> Vec<Vec<Complex64>> {
    let mut s = StreamingInverter::new(m.clone(), lookahead, cfg.clone(), SETTINGS).unwrap();
    let mut frames = Vec::new();
    for t in 0..lm.frames {
        for (idx, f) in s.push(lm.frame(t)).unwrap() {
            assert_eq!(idx, frames.len());
            frames.push(f);
        }
    }
    for (idx, f) in s.finish().unwrap() {
        assert_eq!(idx, frames.len());
        frames.push(f);
    }
    frames
}

#[test]
fn streaming_matches_batch_bitwise() {
    let (lm, cfg, len) = speech_like();
    for k in [lm.frames, lm.frames - 1] {
        let lm = truncate(&lm, k);
        for (mode, lookahead) in [(Mode::Full, true), (Mode::Strided, true), (Mode::Strided, false)] {
            let m = model(mode);
            let (batch, _) =
                reconstruct_spectrogram(&lm, &cfg, len, Features::Cnn { model: &m, lookahead }, SETTINGS, None).unwrap();
            let frames = streamed(&lm, &cfg, &m, lookahead);
            assert_eq!(frames.len(), lm.frames, "{mode} lookahead {lookahead}");
            for (t, f) in frames.iter().enumerate() {
                assert_eq!(f.as_slice(), batch.frame(t), "{mode} lookahead {lookahead} frame {t}");
            }
        }
    }
}
