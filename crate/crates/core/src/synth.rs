//! Synthetic test signals and a small training corpus generator.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::stft::Waveform;
use crate::wav::{write_wav, WavFormat};

fn secs_to_len(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).round() as usize
}

pub fn tone(freq_hz: f64, seconds: f64, sample_rate: u32, amp: f64) -> Waveform {
    let sr = sample_rate as f64;
    let s = (0..secs_to_len(seconds, sample_rate))
        .map(|n| amp * (2.0 * PI * freq_hz * n as f64 / sr).sin())
        .collect();
    Waveform { samples: s, sample_rate }
}

/// Linear frequency sweep from `f0` to `f1`.
pub fn chirp(f0: f64, f1: f64, seconds: f64, sample_rate: u32, amp: f64) -> Waveform {
    let sr = sample_rate as f64;
    let rate = (f1 - f0) / seconds.max(1e-12);
    let s = (0..secs_to_len(seconds, sample_rate))
        .map(|n| {
            let t = n as f64 / sr;
            amp * (2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin()
        })
        .collect();
    Waveform { samples: s, sample_rate }
}

/// Chirp with a slow amplitude envelope, a crude stand-in for a voiced
/// speech segment.
pub fn am_chirp(f0: f64, f1: f64, seconds: f64, sample_rate: u32) -> Waveform {
    let mut w = chirp(f0, f1, seconds, sample_rate, 1.0);
    let sr = sample_rate as f64;
    for (n, v) in w.samples.iter_mut().enumerate() {
        *v *= 0.6 + 0.35 * (2.0 * PI * 3.0 * n as f64 / sr).sin();
    }
    w
}

pub fn white_noise(seconds: f64, sample_rate: u32, amp: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (0..secs_to_len(seconds, sample_rate))
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (amp * z).clamp(-1.0, 1.0)
        })
        .collect();
    Waveform { samples: s, sample_rate }
}

/// Harmonic tone with a few partials and vibrato.
pub fn harmonic(f0: f64, seconds: f64, sample_rate: u32, partials: usize) -> Waveform {
    let sr = sample_rate as f64;
    let mut phase = 0.0;
    let s = (0..secs_to_len(seconds, sample_rate))
        .map(|n| {
            let t = n as f64 / sr;
            let f = f0 * (1.0 + 0.01 * (2.0 * PI * 5.0 * t).sin());
            phase += 2.0 * PI * f / sr;
            (1..=partials).map(|k| (k as f64 * phase).sin() / k as f64).sum::<f64>() * 0.4
        })
        .collect();
    Waveform { samples: s, sample_rate }
}

/// Tone at `fc` with sinusoidal frequency modulation (`dev` Hz at `fm` Hz)
/// and amplitude modulation (`am_depth` at `am_rate` Hz).
pub fn modulated_tone(
    fc: f64,
    dev: f64,
    fm: f64,
    am_rate: f64,
    am_depth: f64,
    seconds: f64,
    sample_rate: u32,
) -> Waveform {
    let sr = sample_rate as f64;
    let mut phase = 0.0;
    let s = (0..secs_to_len(seconds, sample_rate))
        .map(|n| {
            let t = n as f64 / sr;
            phase += 2.0 * PI * (fc + dev * (2.0 * PI * fm * t).sin()) / sr;
            (1.0 - am_depth + am_depth * (2.0 * PI * am_rate * t).sin()) * phase.sin()
        })
        .collect();
    Waveform { samples: s, sample_rate }
}

/// `count` clips cycling through tones, chirps, harmonic tones and noise,
/// with seeded random parameters.
pub fn corpus(count: usize, seconds: f64, sample_rate: u32, seed: u64) -> Vec<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nyq = sample_rate as f64 / 2.0;
    (0..count)
        .map(|i| match i % 4 {
            0 => tone(rng.random_range(80.0..0.8 * nyq), seconds, sample_rate, rng.random_range(0.1..0.8)),
            1 => {
                let f0 = rng.random_range(80.0..0.6 * nyq);
                let f1 = rng.random_range(80.0..0.6 * nyq);
                am_chirp(f0, f1, seconds, sample_rate)
            }
            2 => harmonic(rng.random_range(90.0..300.0), seconds, sample_rate, rng.random_range(3..8)),
            _ => white_noise(seconds, sample_rate, rng.random_range(0.05..0.3), rng.random()),
        })
        .collect()
}

/// Writes [`corpus`] as 16-bit mono files `clip_000.wav`, `clip_001.wav`, …
pub fn write_corpus(dir: impl AsRef<Path>, count: usize, seconds: f64, sample_rate: u32, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    for (i, w) in corpus(count, seconds, sample_rate, seed).iter().enumerate() {
        write_wav(dir.as_ref().join(format!("clip_{i:03}.wav")), w, WavFormat::Pcm16)?;
    }
    Ok(())
}
