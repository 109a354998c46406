//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use specinv::cnn::Mode;
use specinv::pipeline::InitMode;
use specinv::solver::WeightScheme;
use specinv::stft::WindowKind;

#[derive(Debug, Parser)]
#[command(name = "specinv", version, about = "Streaming spectrogram inversion: phase-derivative CNN plus tridiagonal phase solver")]
#[command(propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reconstruct waveforms from the magnitudes of the given recordings
    Invert(InvertArgs),
    /// Train the CNN on a directory of mono WAV files
    Train(TrainArgs),
    /// Time the solvers (and optionally the CNN) and write CSV
    Bench(BenchArgs),
    /// Log-spectral convergence between reference and estimate
    Metrics(MetricsArgs),
    /// STFT followed by ISTFT; reports the reconstruction error
    Roundtrip(RoundtripArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleFormat {
    Float32,
    Pcm16,
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// Window length in samples
    #[arg(long, default_value_t = 1024)]
    pub win: usize,
    /// Hop size in samples
    #[arg(long, default_value_t = 256)]
    pub hop: usize,
    /// Analysis window: hann or gaussian:<lambda>
    #[arg(long, default_value = "hann", value_parser = parse_window)]
    pub window: WindowKind,
    /// CNN weights file (SIW1)
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// CNN inference mode: full or strided
    #[arg(long, default_value = "full", value_parser = parse_mode)]
    pub mode: Mode,
    /// Strided mode only: wait one hop to fill skipped frames
    #[arg(long, value_enum, default_value = "on")]
    pub lookahead: OnOff,
    /// Frame-0 phase: zeros, random:<seed> or oracle
    #[arg(long, default_value = "zeros", value_parser = parse_init)]
    pub init: InitMode,
    /// Solver weight scheme: geometric, squared-current, uniform or time-only
    #[arg(long, default_value = "geometric", value_parser = parse_scheme)]
    pub scheme: WeightScheme,
    /// Seed for every random choice
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Utterances processed in parallel (invert and metrics)
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    /// Input WAV (mono); repeat for batch mode
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Output WAV; one per --input
    #[arg(long, required = true)]
    pub output: Vec<PathBuf>,
    /// Use phase derivatives of the input instead of the CNN
    #[arg(long)]
    pub oracle_features: bool,
    /// Output sample format
    #[arg(long, value_enum, default_value = "float32")]
    pub format: SampleFormat,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of mono WAV files
    #[arg(long)]
    pub data: PathBuf,
    /// Weights file to write; the loss CSV and state go beside it
    #[arg(long)]
    pub out: PathBuf,
    /// Total optimizer steps
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Segments per batch
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Peak learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Linear warm-up steps
    #[arg(long, default_value_t = 100)]
    pub ramp_steps: usize,
    /// Cosine cycle length in steps
    #[arg(long, default_value_t = 500)]
    pub cycle_steps: usize,
    /// Segment length in seconds
    #[arg(long, default_value_t = 1.0)]
    pub segment: f64,
    /// Steps between checkpoints
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    /// Tensor name prefix to keep fixed; repeatable
    #[arg(long)]
    pub freeze: Vec<String>,
    /// Continue from a saved state file
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated solvers: thomas, dense, iterative
    #[arg(long, default_value = "thomas,dense,iterative")]
    pub solvers: String,
    /// Also time CNN inference
    #[arg(long)]
    pub cnn: bool,
    /// System sizes: lo..hi (powers of two) or a comma list
    #[arg(long, default_value = "128..8192")]
    pub sizes: String,
    /// Timed runs per measurement
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Largest size timed with the dense solver
    #[arg(long, default_value_t = 4096)]
    pub dense_cap: usize,
    /// Frames streamed per CNN run
    #[arg(long, default_value_t = 64)]
    pub cnn_frames: usize,
    /// Sample rate assumed for GMAC/s
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
    /// CSV output path
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Reference WAV; repeat for batch mode
    #[arg(long = "ref", required = true)]
    pub reference: Vec<PathBuf>,
    /// Estimated WAV; one per --ref
    #[arg(long, required = true)]
    pub est: Vec<PathBuf>,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    /// Input WAV (mono)
    #[arg(long)]
    pub input: PathBuf,
    /// Optional reconstructed WAV
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub shared: Shared,
}

fn parse_window(s: &str) -> Result<WindowKind, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_init(s: &str) -> Result<InitMode, String> {
    s.parse()
}

fn parse_scheme(s: &str) -> Result<WeightScheme, String> {
    s.parse()
}
