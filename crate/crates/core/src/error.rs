use std::path::PathBuf;

/// Errors raised anywhere in the training laboratory.
#[derive(Debug, thiserror::Error)]
pub enum IcpoError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "demo bank exhausted: rule {rule_id} has {available} demonstrations, {requested} requested"
    )]
    BankExhausted {
        rule_id: usize,
        available: usize,
        requested: usize,
    },

    #[error("context overflow: {len} tokens exceed the maximum context of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(
        "warm start failed after {steps} steps: 0-shot accuracy {zero_shot:.3}, \
         k-shot accuracy {k_shot:.3}, required margin {margin:.3}"
    )]
    WarmStartFailed {
        steps: u64,
        zero_shot: f64,
        k_shot: f64,
        margin: f64,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, IcpoError>;

impl IcpoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> IcpoError {
    IcpoError::io(path, source)
}
