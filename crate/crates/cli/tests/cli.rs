//! End-to-end runs of the `specinv` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use specinv::cnn::{CnnWeights, Mode};
use specinv::stft::Waveform;
use specinv::synth::{am_chirp, tone, write_corpus};
use specinv::training::LOSS_CSV_HEADER;
use specinv::wav::{write_wav, WavFormat};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specinv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("bad JSON line `{l}`: {e}")))
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn wav(dir: &Path, name: &str, w: &Waveform) -> PathBuf {
    let path = dir.join(name);
    write_wav(&path, w, WavFormat::Float32).unwrap();
    path
}

#[test]
fn help_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for sub in ["", "invert", "train", "bench", "metrics", "roundtrip"] {
        let mut args: Vec<&str> = if sub.is_empty() { vec![] } else { vec![sub] };
        args.push("--help");
        let o = run(&args);
        assert!(o.status.success());
        let text = String::from_utf8(o.stdout).unwrap();
        let file = golden.join(format!("{}.txt", if sub.is_empty() { "specinv" } else { sub }));
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::write(&file, &text).unwrap();
        }
        let expected = std::fs::read_to_string(&file).unwrap_or_else(|_| panic!("missing {}", file.display()));
        assert_eq!(text, expected, "help for `{sub}` changed; rerun with UPDATE_GOLDEN=1 to accept");
        if !sub.is_empty() {
            for flag in ["--win", "--hop", "--window", "--mode", "--lookahead", "--init", "--seed"] {
                let lines: Vec<&str> = text.lines().collect();
                let start = lines.iter().position(|l| l.trim_start().starts_with(&format!("{flag} "))).unwrap();
                let block = lines[start..]
                    .iter()
                    .take_while(|l| !l.trim_start().starts_with("--") || l.trim_start().starts_with(flag))
                    .take(4)
                    .any(|l| l.contains("[default: "));
                assert!(block, "`{sub}` help lacks a default for {flag}");
            }
        }
    }
}

#[test]
fn invert_with_oracle_features_reconstructs_a_tone() {
    let dir = tempfile::tempdir().unwrap();
    let input = wav(dir.path(), "tone.wav", &tone(440.0, 0.5, 16_000, 0.5));
    let output = dir.path().join("out.wav");
    let o = run(&["invert", "--input", p(&input), "--output", p(&output), "--oracle-features", "--init", "oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = &stdout_json(&o)[0];
    let lsc = report["lsc_db"].as_f64().unwrap();
    assert!(lsc < -100.0, "oracle LSC {lsc}");
    assert_eq!(report["init"], "oracle");
    assert_eq!(report["mode"], "oracle");
    assert!(report["frames"].as_u64().unwrap() > 10);
    let back = specinv::wav::read_wav(&output).unwrap();
    assert_eq!(back.len(), 8000);
}

#[test]
fn invert_with_weights_and_batch_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let a = wav(dir.path(), "a.wav", &am_chirp(300.0, 2000.0, 0.3, 16_000));
    let b = wav(dir.path(), "b.wav", &tone(700.0, 0.3, 16_000, 0.3));
    let weights = dir.path().join("w.siw");
    CnnWeights::init(Mode::Strided, 3).save(&weights).unwrap();
    let (oa, ob) = (dir.path().join("oa.wav"), dir.path().join("ob.wav"));
    let o = run(&[
        "invert", "--input", p(&a), "--output", p(&oa), "--input", p(&b), "--output", p(&ob), "--weights", p(&weights),
        "--lookahead", "off", "--init", "random:5", "--win", "256", "--hop", "64", "--jobs", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = stdout_json(&o);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["input"], p(&a));
    assert_eq!(lines[1]["input"], p(&b));
    assert_eq!(lines[0]["mode"], "strided");
    assert_eq!(lines[0]["config"]["lookahead"], false);
    // Mode given explicitly and contradicting the weights.
    let o = run(&["invert", "--input", p(&a), "--output", p(&oa), "--weights", p(&weights), "--mode", "full"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn invert_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = wav(dir.path(), "tone.wav", &tone(440.0, 0.2, 16_000, 0.5));
    let out = dir.path().join("out.wav");

    let o = run(&["invert", "--input", p(&input), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--weights"), "{}", stderr(&o));

    let o = run(&["invert", "--input", p(&input), "--output", p(&out), "--oracle-features", "--weights", "w.siw"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--oracle-features") && stderr(&o).contains("--weights"));

    let o = run(&["invert", "--input", p(&input), "--output", p(&out), "--oracle-features", "--lookahead", "off"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--oracle-features") && stderr(&o).contains("--lookahead"));

    let o = run(&["invert", "--input", p(&input), "--output", p(&out), "--mode", "full", "--lookahead", "off", "--weights", "w.siw"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--lookahead") && stderr(&o).contains("--mode"));

    let stereo = dir.path().join("stereo.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
    for i in 0..2000 {
        w.write_sample((i % 100) as i16).unwrap();
    }
    w.finalize().unwrap();
    let o = run(&["invert", "--input", p(&stereo), "--output", p(&out), "--oracle-features"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mono required"), "{}", stderr(&o));

    let o = run(&["invert", "--input", "/nonexistent/x.wav", "--output", p(&out), "--oracle-features"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["invert", "--input", p(&input), "--output", p(&out), "--oracle-features", "--win", "100", "--hop", "100"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = run(&["invert", "--bogus"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn metrics_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let x = am_chirp(200.0, 3000.0, 0.5, 16_000);
    let r = wav(dir.path(), "ref.wav", &x);
    let silent = wav(dir.path(), "silent.wav", &Waveform::new(vec![0.0; x.len()], 16_000).unwrap());
    let half = wav(dir.path(), "half.wav", &Waveform::new(x.samples.iter().map(|v| 0.5 * v).collect(), 16_000).unwrap());
    let short = wav(dir.path(), "short.wav", &Waveform::new(x.samples[..x.len() - 2000].to_vec(), 16_000).unwrap());
    let o = run(&["metrics", "--ref", p(&r), "--est", p(&r), "--ref", p(&r), "--est", p(&silent), "--ref", p(&r), "--est", p(&half), "--jobs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Vec<f64> = stdout_json(&o).iter().map(|j| j["lsc_db"].as_f64().unwrap()).collect();
    assert_eq!(v[0], -120.0);
    assert!(v[1].abs() < 1e-9, "{}", v[1]);
    assert!((v[2] + 6.0206).abs() < 1e-3, "{}", v[2]);
    let o = run(&["metrics", "--ref", p(&r), "--est", p(&short)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bench_rows_and_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let args = ["bench", "--sizes", "8,16,32", "--dense-cap", "16", "--csv", p(&csv), "--seed", "4"];
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# iterative_tol=1e-8");
    assert_eq!(lines[1], "solver,n,runs,median_ns,p01_ns,p99_ns");
    assert_eq!(lines.len() - 2, 3 * 3 - 1);
    assert!(!lines.iter().any(|l| l.starts_with("dense,32,")));
    let first = stdout_json(&o)[0]["checksums"].clone();
    let again = stdout_json(&run(&args))[0]["checksums"].clone();
    assert_eq!(first, again);
    assert_eq!(first.as_array().unwrap().len(), 3);

    let o = run(&["bench", "--sizes", "16", "--solvers", "thomas", "--cnn", "--cnn-frames", "2", "--win", "64", "--hop", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let j = &stdout_json(&o)[0];
    assert_eq!(j["cnn"].as_array().unwrap().len(), 2);
    assert!(j["cnn_strided_over_full"].as_f64().unwrap() > 0.0);

    let o = run(&["bench", "--solvers", "thomas,cholesky"]);
    assert_eq!(o.status.code(), Some(3));
}

fn train_args<'a>(data: &'a str, out: &'a str, steps: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--data", data, "--out", out, "--steps", steps, "--batch-size", "2", "--segment", "0.05", "--win", "64",
        "--hop", "16", "--checkpoint-every", "2", "--ramp-steps", "2", "--cycle-steps", "10", "--seed", "9",
    ]
}

#[test]
fn train_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_corpus(&data, 4, 0.2, 8000, 1).unwrap();
    let (a, b, c) = (dir.path().join("a.siw"), dir.path().join("b.siw"), dir.path().join("c.siw"));

    let o = run(&train_args(p(&data), p(&a), "4"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout_json(&o)[0]["steps_run"], 4);
    assert!(run(&train_args(p(&data), p(&b), "4")).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let csv = std::fs::read_to_string(dir.path().join("a.siw.loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(LOSS_CSV_HEADER));
    assert_eq!(csv.lines().count(), 5);

    assert!(run(&train_args(p(&data), p(&c), "2")).status.success());
    let state = dir.path().join("c.siw.state.json");
    let o = run(&["train", "--data", p(&data), "--out", p(&c), "--resume", p(&state), "--steps", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout_json(&o)[0]["steps_run"], 2);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(csv, std::fs::read_to_string(dir.path().join("c.siw.loss.csv")).unwrap());

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = run(&train_args(p(&empty), p(&a), "1"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = run(&["train", "--data", p(&data), "--out", p(&a), "--window", "gaussian:0.1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn roundtrip_reports_tiny_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = wav(dir.path(), "x.wav", &am_chirp(100.0, 5000.0, 0.4, 16_000));
    let out = dir.path().join("y.wav");
    let o = run(&["roundtrip", "--input", p(&input), "--output", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let j = &stdout_json(&o)[0];
    assert!(j["relative_error"].as_f64().unwrap() < 1e-6);
    assert!(out.exists());
    let o = run(&["roundtrip", "--input", p(&input), "--weights", "w.siw"]);
    assert_eq!(o.status.code(), Some(3));
}
