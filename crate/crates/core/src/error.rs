use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("gradient of the barrier vanishes at the witness (norm {norm:e})")]
    DegenerateGradient { norm: f64 },

    #[error("verifier budget exhausted after {boxes} boxes ({reason})")]
    ResourceExhausted { boxes: u64, reason: String },

    #[error("local check at the origin failed: {0}")]
    LocalCheckFailed(String),

    #[error("the set {{h <= 1}} does not meet the domain box")]
    EmptySafeSet,

    #[error("control undefined at {x:?}: L_gW vanishes while L_fW = {lfw:e} >= 0")]
    ControlUndefined { x: Vec<f64>, lfw: f64 },

    #[error("numeric blow-up at t = {t}: |x| = {norm:e}")]
    NumericBlowup { t: f64, norm: f64 },

    #[error("unsupported state dimension {0}")]
    UnsupportedDimension(usize),

    #[error("{stage}: {msg}")]
    Stage { stage: &'static str, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
