use thiserror::Error;

use crate::linalg::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("{equation} failed: {source}")]
    Synthesis {
        equation: &'static str,
        #[source]
        source: NumericsError,
    },

    #[error("invalid {field}: {detail}")]
    Invalid { field: String, detail: String },

    #[error("state norm {norm:.3e} exceeded the blow-up guard at step {step}")]
    BlowUp { step: usize, norm: f64 },

    #[error("ambient dimension {dim} exceeds the cap of {cap}; reduce the state dimension or the maximum delay")]
    ResourceCap { dim: usize, cap: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
