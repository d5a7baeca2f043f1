use thiserror::Error;

/// Errors raised by the flow, loss and oracle layers.
#[derive(Debug, Error)]
pub enum VcnfError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("spline decode error: {0}")]
    Decode(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{primitive}`")]
    NonFinite { primitive: &'static str },

    #[error("quadrature accuracy error: {0}")]
    Accuracy(String),

    #[error("numerical abort at step {step}: {reason}")]
    NumericalAbort { step: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, VcnfError>;

impl VcnfError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        VcnfError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
