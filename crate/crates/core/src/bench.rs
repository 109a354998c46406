//! Timing harness for the tridiagonal solvers and the CNN.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::cnn::{count_params_and_macs, CnnWeights, Mode, Model, StreamingCnn};
use crate::error::{Error, Result};
use crate::phase::ComplexRatios;
use crate::solver::{
    build_system, dense_solve_oracle, dense_solve_oracle_in, iterative_solve, thomas_solve, thomas_solve_into, TridiagonalHermitianSystem,
    WeightFrame,
};

pub const CSV_HEADER: &str = "solver,n,runs,median_ns,p01_ns,p99_ns";
/// Stopping tolerance of the iterative baseline.
pub const ITERATIVE_TOL: f64 = 1e-8;
pub const DEFAULT_DENSE_CAP: usize = 4096;
pub const WARMUP: usize = 3;
/// Reference model constants the CNN is compared against.
pub const REFERENCE_PARAMS: f64 = 247_810.0;
pub const REFERENCE_GMAC_PER_S: f64 = 7.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Thomas,
    Dense,
    Iterative,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Thomas, SolverKind::Dense, SolverKind::Iterative];
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Thomas => "thomas",
            SolverKind::Dense => "dense",
            SolverKind::Iterative => "iterative",
        })
    }
}

impl FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "thomas" => Ok(SolverKind::Thomas),
            "dense" => Ok(SolverKind::Dense),
            "iterative" => Ok(SolverKind::Iterative),
            _ => Err(format!("unknown solver `{s}` (expected thomas|dense|iterative)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    /// Solver name, or `cnn_full` / `cnn_strided`.
    pub solver: String,
    pub n: usize,
    pub runs: usize,
    pub median_ns: f64,
    pub p01_ns: f64,
    pub p99_ns: f64,
}

impl BenchRecord {
    pub fn from_samples(solver: impl Into<String>, n: usize, samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            solver: solver.into(),
            n,
            runs: s.len(),
            median_ns: percentile(&s, 0.5),
            p01_ns: percentile(&s, 0.01),
            p99_ns: percentile(&s, 0.99),
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.0},{:.0},{:.0}",
            self.solver, self.n, self.runs, self.median_ns, self.p01_ns, self.p99_ns
        )
    }
}

/// Linear interpolation between order statistics of sorted `s`.
pub fn percentile(s: &[f64], q: f64) -> f64 {
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im)
}

/// System of size `n` from complex Gaussian ratios and previous frame and
/// `|N(0,1)|` weights.
pub fn random_system(n: usize, rng: &mut ChaCha8Rng) -> TridiagonalHermitianSystem {
    assert!(n >= 2, "system size must be at least 2");
    let abs_normal = |rng: &mut ChaCha8Rng| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z.abs()
    };
    let ratios = ComplexRatios {
        u_ratio: (0..n - 1).map(|_| complex_normal(rng)).collect(),
        v_ratio: (0..n).map(|_| complex_normal(rng)).collect(),
    };
    let prev: Vec<Complex64> = (0..n).map(|_| complex_normal(rng)).collect();
    let weights = WeightFrame {
        lambda_w: (0..n).map(|_| abs_normal(rng)).collect(),
        gamma_w: (0..n - 1).map(|_| abs_normal(rng)).collect(),
    };
    build_system(&ratios, &prev, &weights).expect("random weights are valid")
}

/// Order-sensitive FNV-1a over the bit patterns of all system entries.
pub fn system_checksum(sys: &TridiagonalHermitianSystem) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: f64| {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    sys.diag.iter().for_each(|d| eat(*d));
    for z in sys.lower.iter().chain(&sys.upper).chain(&sys.rhs) {
        eat(z.re);
        eat(z.im);
    }
    h
}

fn relative_error(x: &[Complex64], reference: &[Complex64]) -> f64 {
    let num: f64 = x.iter().zip(reference).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = reference.iter().map(|b| b.norm_sqr()).sum::<f64>().sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

#[derive(Debug, Clone)]
pub struct SolverBenchConfig {
    pub sizes: Vec<usize>,
    pub solvers: Vec<SolverKind>,
    pub runs: usize,
    pub seed: u64,
    /// Dense solver is skipped for `n` above this.
    pub dense_cap: usize,
}

impl Default for SolverBenchConfig {
    fn default() -> Self {
        Self {
            sizes: size_range(128, 8192),
            solvers: SolverKind::ALL.to_vec(),
            runs: 10,
            seed: 0,
            dense_cap: DEFAULT_DENSE_CAP,
        }
    }
}

/// Powers of two from `lo` to `hi` inclusive.
pub fn size_range(lo: usize, hi: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut n = lo.max(2).next_power_of_two();
    while n <= hi {
        out.push(n);
        n *= 2;
    }
    out
}

/// Parses `a..b` (powers of two) or a comma list.
pub fn parse_sizes(s: &str) -> std::result::Result<Vec<usize>, String> {
    let bad = |_| format!("bad size list `{s}`");
    let sizes = if let Some((a, b)) = s.split_once("..") {
        size_range(a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?)
    } else {
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(bad)).collect::<std::result::Result<_, _>>()?
    };
    if sizes.is_empty() || sizes.iter().any(|n| *n < 2) {
        return Err(format!("sizes must be ≥ 2: `{s}`"));
    }
    Ok(sizes)
}

#[derive(Debug, Clone)]
pub struct SolverBenchOutput {
    pub records: Vec<BenchRecord>,
    /// `(n, checksum)` of the timed system for each size.
    pub checksums: Vec<(usize, u64)>,
}

fn time_solver(kind: SolverKind, sys: &TridiagonalHermitianSystem, runs: usize) -> Result<Vec<f64>> {
    let n = sys.len();
    let mut scratch = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    let mut dense = Vec::new();
    let mut once = || -> Result<()> {
        match kind {
            SolverKind::Thomas => thomas_solve_into(black_box(sys), &mut scratch, &mut out)?,
            SolverKind::Dense => {
                black_box(dense_solve_oracle_in(black_box(sys), &mut dense)?);
            }
            SolverKind::Iterative => {
                black_box(iterative_solve(black_box(sys), ITERATIVE_TOL, n)?);
            }
        }
        black_box(&out);
        Ok(())
    };
    for _ in 0..WARMUP {
        once()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        once()?;
        samples.push(t0.elapsed().as_nanos() as f64);
    }
    Ok(samples)
}

/// Times each solver on one seeded random system per size, after checking
/// every solver against the dense oracle on that system.
pub fn bench_solvers(cfg: &SolverBenchConfig) -> Result<SolverBenchOutput> {
    if cfg.runs < 10 {
        return Err(Error::InvalidConfig(format!("runs must be ≥ 10, got {}", cfg.runs)));
    }
    if cfg.sizes.iter().any(|n| *n < 2) {
        return Err(Error::InvalidConfig("sizes must be ≥ 2".into()));
    }
    let mut records = Vec::new();
    let mut checksums = Vec::new();
    for &n in &cfg.sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let sys = random_system(n, &mut rng);
        let sum = system_checksum(&sys);
        log::info!("n={n} system checksum {sum:016x}");
        checksums.push((n, sum));
        let active: Vec<SolverKind> = cfg
            .solvers
            .iter()
            .copied()
            .filter(|k| *k != SolverKind::Dense || n <= cfg.dense_cap)
            .collect();
        // The correctness pass always uses the dense oracle; the cap only
        // limits timing.
        let reference = dense_solve_oracle(&sys)?;
        for k in &cfg.solvers {
            let x = match k {
                SolverKind::Thomas => thomas_solve(&sys)?,
                SolverKind::Dense => continue,
                SolverKind::Iterative => iterative_solve(&sys, ITERATIVE_TOL, n)?.x,
            };
            let err = relative_error(&x, &reference);
            if !(err < 1e-6) {
                return Err(Error::InvalidConfig(format!("{k} disagrees with dense at n={n}: {err:e}")));
            }
        }
        for k in active {
            let samples = time_solver(k, &sys, cfg.runs)?;
            records.push(BenchRecord::from_samples(k.to_string(), n, &samples));
        }
    }
    Ok(SolverBenchOutput { records, checksums })
}

#[derive(Debug, Clone, Serialize)]
pub struct CnnBench {
    pub record: BenchRecord,
    pub mode: Mode,
    pub params: usize,
    pub gmac_per_s: f64,
    pub params_reduction: f64,
    pub gmac_reduction: f64,
}

/// Streaming inference time per frame (f32) over `frames` random frames of
/// `freq` bins, repeated `runs` times.
pub fn bench_cnn(w: &CnnWeights, freq: usize, frames: usize, runs: usize, frames_per_second: f64) -> Result<CnnBench> {
    if runs < 10 || frames == 0 {
        return Err(Error::InvalidConfig("cnn bench needs runs ≥ 10 and frames ≥ 1".into()));
    }
    let model: Model<f32> = Model::from_weights(w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input: Vec<Vec<f32>> = (0..frames)
        .map(|_| {
            (0..freq)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z - 3.0) as f32
                })
                .collect()
        })
        .collect();
    let run = || -> Result<()> {
        let mut s = StreamingCnn::new(model.clone(), true);
        for f in &input {
            black_box(s.push(black_box(f))?);
        }
        black_box(s.finish()?);
        Ok(())
    };
    for _ in 0..WARMUP {
        run()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        run()?;
        samples.push(t0.elapsed().as_nanos() as f64 / frames as f64);
    }
    let cost = count_params_and_macs(w, freq, frames_per_second);
    Ok(CnnBench {
        record: BenchRecord::from_samples(format!("cnn_{}", w.mode()), freq, &samples),
        mode: w.mode(),
        params: cost.params,
        gmac_per_s: cost.gmac_per_s,
        params_reduction: REFERENCE_PARAMS / cost.params as f64,
        gmac_reduction: REFERENCE_GMAC_PER_S / cost.gmac_per_s,
    })
}

/// Writes the CSV with a leading comment naming the iterative tolerance.
pub fn write_csv(out: &mut impl Write, records: &[BenchRecord]) -> std::io::Result<()> {
    writeln!(out, "# iterative_tol={ITERATIVE_TOL:e}")?;
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        let r = BenchRecord::from_samples("thomas", 4, &s);
        assert_eq!(r.runs, 10);
        assert_eq!(r.median_ns, 5.5);
        assert!((r.p01_ns - 1.09).abs() < 1e-12);
        assert!((r.p99_ns - 9.91).abs() < 1e-12);
        assert!(r.p01_ns <= r.median_ns && r.median_ns <= r.p99_ns);
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_sizes("128..1024").unwrap(), vec![128, 256, 512, 1024]);
        assert_eq!(parse_sizes("2, 4097").unwrap(), vec![2, 4097]);
        assert!(parse_sizes("1,4").is_err());
        assert!(parse_sizes("x..4").is_err());
    }

    #[test]
    fn seeded_systems_repeat() {
        let a = random_system(33, &mut ChaCha8Rng::seed_from_u64(4));
        let b = random_system(33, &mut ChaCha8Rng::seed_from_u64(4));
        let c = random_system(33, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(system_checksum(&a), system_checksum(&b));
        assert_ne!(system_checksum(&a), system_checksum(&c));
        assert!(a.diag.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn rows_and_dense_cap() {
        let cfg = SolverBenchConfig {
            sizes: vec![8, 16, 32],
            solvers: SolverKind::ALL.to_vec(),
            runs: 10,
            seed: 1,
            dense_cap: 16,
        };
        let out = bench_solvers(&cfg).unwrap();
        assert_eq!(out.records.len(), 3 * 3 - 1);
        assert!(!out.records.iter().any(|r| r.solver == "dense" && r.n == 32));
        let again = bench_solvers(&cfg).unwrap();
        assert_eq!(out.checksums, again.checksums);
        let mut buf = Vec::new();
        write_csv(&mut buf, &out.records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1), Some(CSV_HEADER));
        assert_eq!(text.lines().count(), 2 + out.records.len());
        assert!(text.starts_with("# iterative_tol=1e-8"));
    }

    #[test]
    fn cnn_bench_reports_costs() {
        let w = CnnWeights::init(Mode::Full, 0);
        let b = bench_cnn(&w, 33, 4, 10, 62.5).unwrap();
        assert_eq!(b.record.runs, 10);
        assert_eq!(b.params, w.param_count());
        assert!((b.params_reduction - REFERENCE_PARAMS / b.params as f64).abs() < 1e-12);
    }
}
