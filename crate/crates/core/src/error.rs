use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // audio_io
    #[error("malformed WAV: {0}")]
    MalformedWav(String),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("offset {offset} is beyond clip of {len} samples")]
    OffsetBeyondClip { offset: usize, len: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate utterance path {0:?}")]
    DuplicatePath(String),

    // dsp_frontend
    #[error("expected {expected} samples, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("clip too short: {0} samples, need at least one full frame")]
    TooShort(usize),

    // nn_core
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called without a forward cache")]
    MissingCache,
    #[error("batch too small: {got} (need at least {need})")]
    BatchTooSmall { got: usize, need: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid pair label {0} (expected 0 or 1)")]
    InvalidLabel(u8),
    #[error("parameters do not match model spec: {0}")]
    SpecMismatch(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    // training
    #[error("need at least 2 speakers, manifest has {0}")]
    TooFewSpeakers(usize),
    #[error("invalid configuration: {0}")]
    Config(String),

    // verification
    #[error("no embeddings to enroll")]
    NoEmbeddings,
    #[error("vector norm is zero")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("{0} score list is empty")]
    EmptySide(&'static str),
    #[error("infeasible trial request: {0}")]
    Infeasible(String),

    // gmm_ubm
    #[error("too few frames: {got} (need at least {need})")]
    TooFewFrames { got: usize, need: usize },
    #[error("GMM file error: {0}")]
    GmmFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
