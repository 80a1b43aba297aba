use crate::wigner::WignerState;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("integration diverged at t = {time}: {reason}")]
    Integration { time: f64, reason: String },
    #[error("Wigner evolution produced non-finite values at t = {time}")]
    WignerBlowUp {
        time: f64,
        last_good: Box<WignerState>,
    },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("degenerate problem: {0}")]
    Degenerate(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }
}

pub type Result<T> = std::result::Result<T, Error>;
