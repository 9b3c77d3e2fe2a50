use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("room too small or T60 too short: absorption {0:.4} exceeds 1")]
    AbsorptionTooHigh(f64),

    #[error("decay range not reached")]
    DecayRangeNotReached,

    #[error("rejection sampling exceeded {0} attempts")]
    RejectionExhausted(usize),

    #[error("silent target: SIR is undefined for a zero-power target")]
    SilentTarget,

    #[error("zero reference signal")]
    ZeroReference,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("non-finite loss at epoch {epoch}, clip {clip}")]
    NonFiniteLoss { epoch: usize, clip: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
