use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate batch in {op}: {count} element(s) per channel, at least 2 required")]
    DegenerateBatch { op: &'static str, count: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch} (lr {lr}): loss is not finite")]
    Divergence { epoch: usize, lr: f64 },

    #[error("batch stream exhausted after {completed} of {requested} steps")]
    Exhausted { completed: usize, requested: usize },

    #[error("load error: {0}")]
    Load(String),

    #[error("malformed archive: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
