//! Subcommand implementations. Each returns the JSON values to print.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde_json::{json, Value};
use specinv::bench::{bench_cnn, bench_solvers, parse_sizes, write_csv, SolverBenchConfig, SolverKind};
use specinv::cnn::{CnnWeights, Mode, Model};
use specinv::pipeline::{invert, lsc, Features, InversionSettings};
use specinv::stft::{istft, log_magnitude, stft, AnalysisConfig, WindowKind};
use specinv::training::{load_dataset, train_to_files, TrainOutputs, TrainState, Trainer, TrainingConfig};
use specinv::wav::{read_wav, write_wav, WavFormat};

use crate::args::{BenchArgs, InvertArgs, MetricsArgs, OnOff, RoundtripArgs, SampleFormat, Shared, TrainArgs};
use crate::failure::Failure;

/// Whether `id` was given on the command line rather than defaulted.
fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

fn reject_shared_flags(m: &ArgMatches, command: &str, ids: &[&str]) -> Result<(), Failure> {
    for id in ids {
        if explicit(m, id) {
            return Err(Failure::config(format!("--{id} has no effect with {command}")));
        }
    }
    Ok(())
}

fn analysis(shared: &Shared, sample_rate: u32) -> Result<AnalysisConfig, Failure> {
    Ok(AnalysisConfig::new(shared.win, shared.hop, shared.window, sample_rate)?)
}

fn load_weights(path: &Path) -> Result<CnnWeights, Failure> {
    CnnWeights::load(path).map_err(|e| Failure::from(e).context(path.display()))
}

fn run_jobs<T: Send, R: Send>(items: Vec<T>, jobs: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.into_iter().map(f).collect();
    }
    let mut buckets: Vec<Vec<(usize, T)>> = (0..jobs).map(|_| Vec::new()).collect();
    for (i, item) in items.into_iter().enumerate() {
        buckets[i % jobs].push((i, item));
    }
    let mut out: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = buckets
            .into_iter()
            .map(|b| {
                let f = &f;
                s.spawn(move || b.into_iter().map(|(i, t)| (i, f(t))).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

/// Collects per-item results; the first failure decides the exit code.
fn batch_outcome(results: Vec<Result<Value, Failure>>) -> Result<Vec<Value>, Failure> {
    let mut values = Vec::new();
    let mut first: Option<Failure> = None;
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(e) => {
                log::error!("{e}");
                first.get_or_insert(e);
            }
        }
    }
    match first {
        None => Ok(values),
        Some(e) if values.is_empty() => Err(e),
        Some(e) => {
            for v in &values {
                println!("{v}");
            }
            Err(e)
        }
    }
}

pub fn invert_cmd(args: InvertArgs, m: &ArgMatches) -> Result<Vec<Value>, Failure> {
    let s = &args.shared;
    if args.input.len() != args.output.len() {
        return Err(Failure::config(format!(
            "--input given {} times but --output {} times",
            args.input.len(),
            args.output.len()
        )));
    }
    if s.lookahead == OnOff::Off && s.mode == Mode::Full && explicit(m, "mode") {
        return Err(Failure::config("--lookahead off requires --mode strided"));
    }
    let model = if args.oracle_features {
        if s.weights.is_some() {
            return Err(Failure::config("--oracle-features cannot be combined with --weights"));
        }
        for id in ["mode", "lookahead"] {
            if explicit(m, id) {
                return Err(Failure::config(format!("--oracle-features cannot be combined with --{id}")));
            }
        }
        None
    } else {
        let path = s
            .weights
            .as_ref()
            .ok_or_else(|| Failure::config("--weights is required unless --oracle-features is given"))?;
        let w = load_weights(path)?;
        let model: Model<f64> = Model::from_weights(&w)?;
        if explicit(m, "mode") {
            model.check_mode(s.mode)?;
        }
        if s.lookahead == OnOff::Off && model.mode() == Mode::Full {
            return Err(Failure::config("--lookahead off requires --mode strided (weights are full mode)"));
        }
        Some(model)
    };
    let settings = InversionSettings {
        init: s.init,
        scheme: s.scheme,
    };
    let format = match args.format {
        SampleFormat::Float32 => WavFormat::Float32,
        SampleFormat::Pcm16 => WavFormat::Pcm16,
    };
    let pairs: Vec<(PathBuf, PathBuf)> = args.input.into_iter().zip(args.output).collect();
    let one = |(input, output): (PathBuf, PathBuf)| -> Result<Value, Failure> {
        let wave = read_wav(&input).map_err(|e| Failure::from(e).context(input.display()))?;
        let cfg = analysis(s, wave.sample_rate)?;
        let spec = stft(&wave, &cfg)?;
        let lm = log_magnitude(&spec);
        let features = match &model {
            Some(model) => Features::Cnn {
                model,
                lookahead: s.lookahead == OnOff::On,
            },
            None => Features::Oracle(&spec),
        };
        // Oracle init takes frame 0 from the input even with CNN features.
        let (est, report) = invert(&lm, &cfg, wave.len(), features, settings, Some(&spec))?;
        write_wav(&output, &est, format).map_err(|e| Failure::from(e).context(output.display()))?;
        let mut v = report.summary_json();
        v["input"] = json!(input.display().to_string());
        v["output"] = json!(output.display().to_string());
        Ok(v)
    };
    batch_outcome(run_jobs(pairs, s.jobs, one))
}

fn training_config(args: &TrainArgs) -> TrainingConfig {
    TrainingConfig {
        batch_size: args.batch_size,
        peak_lr: args.lr,
        ramp_steps: args.ramp_steps,
        cycle_steps: args.cycle_steps,
        segment_seconds: args.segment,
        steps: args.steps,
        seed: args.shared.seed,
        win_len: args.shared.win,
        hop: args.shared.hop,
        checkpoint_every: args.checkpoint_every,
        frozen: args.freeze.clone(),
        ..TrainingConfig::default()
    }
}

pub fn train_cmd(args: TrainArgs, m: &ArgMatches) -> Result<Vec<Value>, Failure> {
    let s = &args.shared;
    if s.window != WindowKind::Hann {
        return Err(Failure::config("--window must be hann with train"));
    }
    reject_shared_flags(m, "train", &["weights", "lookahead", "init", "scheme", "jobs"])?;
    let trainer = match &args.resume {
        Some(path) => {
            let mut state = TrainState::load(path).map_err(|e| Failure::from(e).context(path.display()))?;
            if explicit(m, "mode") && state.mode != s.mode {
                return Err(Failure::config(format!(
                    "--mode {} conflicts with --resume state in {} mode",
                    s.mode, state.mode
                )));
            }
            if explicit(m, "steps") {
                state.config.steps = args.steps;
            }
            Trainer::resume(state)?
        }
        None => Trainer::new(training_config(&args), s.mode)?,
    };
    let clips = load_dataset(&args.data).map_err(|e| Failure::from(e).context(args.data.display()))?;
    let out = TrainOutputs::beside(&args.out);
    let (w, log) = train_to_files(&clips, trainer, &out)?;
    let last = log.last();
    Ok(vec![json!({
        "mode": w.mode().to_string(),
        "params": w.param_count(),
        "clips": clips.len(),
        "steps_run": log.len(),
        "final_step": last.map(|r| r.step),
        "loss_fpd": last.map(|r| r.loss_fpd),
        "loss_bpd": last.map(|r| r.loss_bpd),
        "weights": out.weights.display().to_string(),
        "loss_csv": out.loss_csv.display().to_string(),
        "state": out.state.display().to_string(),
    })])
}

pub fn bench_cmd(args: BenchArgs, m: &ArgMatches) -> Result<Vec<Value>, Failure> {
    reject_shared_flags(m, "bench", &["lookahead", "init", "scheme", "jobs", "window"])?;
    let sizes = parse_sizes(&args.sizes).map_err(Failure::config)?;
    let solvers = args
        .solvers
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<SolverKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::config)?;
    if args.runs < 10 {
        return Err(Failure::config(format!("--runs must be at least 10, got {}", args.runs)));
    }
    let cfg = SolverBenchConfig {
        sizes,
        solvers,
        runs: args.runs,
        seed: args.shared.seed,
        dense_cap: args.dense_cap,
    };
    let out = if cfg.solvers.is_empty() {
        specinv::bench::SolverBenchOutput {
            records: Vec::new(),
            checksums: Vec::new(),
        }
    } else {
        bench_solvers(&cfg)?
    };
    let mut records = out.records.clone();
    let mut cnn = Vec::new();
    if args.cnn {
        let freq = args.shared.win / 2 + 1;
        let fps = args.sample_rate as f64 / args.shared.hop as f64;
        let weights = match &args.shared.weights {
            Some(p) => vec![load_weights(p)?],
            None => [Mode::Full, Mode::Strided].map(|mode| CnnWeights::init(mode, args.shared.seed)).to_vec(),
        };
        for w in &weights {
            let b = bench_cnn(w, freq, args.cnn_frames, args.runs, fps)?;
            records.push(b.record.clone());
            cnn.push(b);
        }
    } else if explicit(m, "weights") {
        return Err(Failure::config("--weights requires --cnn with bench"));
    }
    if let Some(path) = &args.csv {
        let mut f = BufWriter::new(File::create(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?);
        write_csv(&mut f, &records)?;
    }
    let strided_over_full = match cnn.as_slice() {
        [a, b] if a.mode == Mode::Full && b.mode == Mode::Strided => Some(b.record.median_ns / a.record.median_ns),
        _ => None,
    };
    Ok(vec![json!({
        "records": records,
        "checksums": out.checksums.iter().map(|(n, c)| json!({"n": n, "checksum": format!("{c:016x}")})).collect::<Vec<_>>(),
        "cnn": cnn,
        "cnn_strided_over_full": strided_over_full,
        "iterative_tol": specinv::bench::ITERATIVE_TOL,
    })])
}

pub fn metrics_cmd(args: MetricsArgs, m: &ArgMatches) -> Result<Vec<Value>, Failure> {
    reject_shared_flags(m, "metrics", &["weights", "mode", "lookahead", "init", "scheme"])?;
    if args.reference.len() != args.est.len() {
        return Err(Failure::config(format!(
            "--ref given {} times but --est {} times",
            args.reference.len(),
            args.est.len()
        )));
    }
    let s = &args.shared;
    let pairs: Vec<(PathBuf, PathBuf)> = args.reference.into_iter().zip(args.est).collect();
    let one = |(r, e): (PathBuf, PathBuf)| -> Result<Value, Failure> {
        let reference = read_wav(&r).map_err(|err| Failure::from(err).context(r.display()))?;
        let est = read_wav(&e).map_err(|err| Failure::from(err).context(e.display()))?;
        if reference.sample_rate != est.sample_rate {
            return Err(Failure::config(format!(
                "sample rates differ: {} Hz vs {} Hz",
                reference.sample_rate, est.sample_rate
            )));
        }
        let cfg = analysis(s, reference.sample_rate)?;
        let db = lsc(&stft(&reference, &cfg)?, &est)?;
        Ok(json!({"ref": r.display().to_string(), "est": e.display().to_string(), "lsc_db": db}))
    };
    batch_outcome(run_jobs(pairs, s.jobs, one))
}

pub fn roundtrip_cmd(args: RoundtripArgs, m: &ArgMatches) -> Result<Vec<Value>, Failure> {
    reject_shared_flags(m, "roundtrip", &["weights", "mode", "lookahead", "init", "scheme", "jobs"])?;
    let wave = read_wav(&args.input).map_err(|e| Failure::from(e).context(args.input.display()))?;
    let cfg = analysis(&args.shared, wave.sample_rate)?;
    let back = istft(&stft(&wave, &cfg)?)?;
    let max_err = back.samples.iter().zip(&wave.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if let Some(out) = &args.output {
        write_wav(out, &back, WavFormat::Float32).map_err(|e| Failure::from(e).context(out.display()))?;
    }
    let peak = wave.peak();
    Ok(vec![json!({
        "input": args.input.display().to_string(),
        "samples": wave.len(),
        "max_abs_error": max_err,
        "relative_error": if peak > 0.0 { max_err / peak } else { 0.0 },
        "win": cfg.win_len(),
        "hop": cfg.hop(),
        "window": cfg.window().to_string(),
    })])
}
