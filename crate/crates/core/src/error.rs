use thiserror::Error;

/// Errors produced by the inversion engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid analysis config: {0}")]
    InvalidConfig(String),

    #[error("window/hop pair violates NOLA: min overlap-add of squared window is {min_sum:e}")]
    Nola { min_sum: f64 },

    #[error("empty waveform")]
    EmptyWaveform,

    #[error("non-finite sample at index {0}")]
    NonFinite(usize),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("frame index {index} out of range (0..{frames})")]
    FrameOutOfRange { index: usize, frames: usize },

    #[error("zero pivot at row {row} of tridiagonal system")]
    ZeroPivot { row: usize },

    #[error("singular matrix (pivot column {0})")]
    Singular(usize),

    #[error("solver failed at frame {frame}: {source}")]
    FrameSolve {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("window kind mismatch: {0}")]
    WindowKind(String),

    #[error("no time-frequency bins above the magnitude threshold")]
    EmptyMask,

    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(String),

    #[error("weights: {0}")]
    Weights(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("reference spectrogram is all zeros")]
    ZeroReference,

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("mono required, got {0} channels")]
    NotMono(u16),

    #[error("unsupported WAV sample format: {0}")]
    UnsupportedFormat(String),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
