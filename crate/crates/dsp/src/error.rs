use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("frequency {freq} Hz is at or above the Nyquist limit {nyquist} Hz")]
    AboveNyquist { freq: f64, nyquist: f64 },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: length mismatch ({a} vs {b})")]
    LengthMismatch { op: &'static str, a: usize, b: usize },
    #[error("{0}: input is silent")]
    Silent(&'static str),
    #[error("{op}: input has {len} samples, need at least {need}")]
    TooShort { op: &'static str, len: usize, need: usize },
    #[error("peak {peak} exceeds full scale")]
    Clipping { peak: f64 },
    #[error("non-finite sample value")]
    NonFinite,
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> DspError {
    DspError::InvalidArgument { op, msg: msg.into() }
}
