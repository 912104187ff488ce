use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic: not an RVF1 file")]
    BadMagic,
    #[error("unsupported bit depth {0} (expected 8, 12 or 16)")]
    BadDepth(u8),
    #[error("truncated payload: need {expected} bytes, have {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("sample {value} at index {index} does not fit in {depth_bits} bits")]
    SampleOutOfRange {
        index: usize,
        value: u32,
        depth_bits: u8,
    },
    #[error("volume dimensions must be positive, got {t}x{h}x{w}")]
    EmptyDims { t: usize, h: usize, w: usize },
    #[error("expected {expected} samples, got {actual}")]
    SampleCount { expected: usize, actual: usize },
    #[error("slice mismatch: expected (h, w, maxval) = {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize, u32),
        actual: (usize, usize, u32),
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoderError {
    #[error("invalid coder interval [{lo}, {hi})")]
    InvalidInterval { lo: u32, hi: u32 },
    #[error("range decoder ran out of input")]
    TruncatedPayload,
    #[error("decoded frequency {0} outside the coder grid")]
    CorruptTarget(u32),
}

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("bad magic: not an SRLW weights file")]
    BadMagic,
    #[error("unsupported SRLW version {0}")]
    BadVersion(u8),
    #[error("unsupported weight dtype {0}")]
    BadDtype(u8),
    #[error("invalid hyperparameters: {0}")]
    BadShape(String),
    #[error("stored parameter count {stored} does not match the recomputed {computed}")]
    CountMismatch { stored: u32, computed: u32 },
    #[error("weights file truncated")]
    Truncated,
    #[error("weight tensor `{0}` holds a non-finite value")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("volume depth {volume} bits does not match model depth {model} bits")]
    DepthMismatch { volume: u8, model: u8 },
    #[error("bad magic: not an SRLV stream")]
    BadMagic,
    #[error("unsupported SRLV version {0}")]
    BadVersion(u8),
    #[error("stream was produced with different weights")]
    DigestMismatch,
    #[error("stream header disagrees with the model: {0}")]
    ModelMismatch(String),
    #[error("stream truncated")]
    TruncatedPayload,
    #[error("corrupt escape table: {0}")]
    CorruptEscapeTable(String),
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl From<CoderError> for CodecError {
    fn from(e: CoderError) -> Self {
        match e {
            CoderError::TruncatedPayload => CodecError::TruncatedPayload,
            other => CodecError::Corrupt(other.to_string()),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, volume {volume}, window starting at slice {slice}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        volume: usize,
        slice: usize,
        detail: String,
    },
    #[error("dataset mixes bit depths {0} and {1}")]
    MixedDepth(u8, u8),
    #[error("volume depth {volume} bits does not match model depth {model} bits")]
    DepthMismatch { volume: u8, model: u8 },
    #[error("invalid training config: {0}")]
    Config(String),
}
