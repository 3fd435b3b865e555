//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VfemError>;

#[derive(Debug, Error)]
pub enum VfemError {
    /// `d_i = β_misᵀ Σ_mis β_mis + σ²` (or σ² itself) is not strictly positive.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("singular covariance for client {client}")]
    SingularCovariance { client: usize },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("insufficient complete cases: need {needed}, found {found}")]
    InsufficientCompleteCases { needed: usize, found: usize },

    #[error("protocol desync: {0}")]
    ProtocolDesync(String),

    #[error("message rejected by schema: {0}")]
    Schema(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("estimate is not a fixed point of the EM map (sup-norm residual {residual:.3e}); tighten the convergence tolerance and refit")]
    NotAFixedPoint { residual: f64 },

    #[error("mask generation failed after {attempts} attempts")]
    MaskRetryExhausted { attempts: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("too many failed replicates: {failed} of {total}")]
    HarnessFailure { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VfemError {
    /// Short machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            VfemError::DegenerateVariance(_) => "DegenerateVariance",
            VfemError::SingularCovariance { .. } => "SingularCovariance",
            VfemError::SingularSystem(_) => "SingularSystem",
            VfemError::InsufficientData(_) => "InsufficientData",
            VfemError::InsufficientCompleteCases { .. } => "InsufficientCompleteCases",
            VfemError::ProtocolDesync(_) => "ProtocolDesync",
            VfemError::Schema(_) => "Schema",
            VfemError::Transport(_) => "Transport",
            VfemError::NotAFixedPoint { .. } => "NotAFixedPoint",
            VfemError::MaskRetryExhausted { .. } => "MaskRetryExhausted",
            VfemError::InvalidConfig(_) => "InvalidConfig",
            VfemError::InvalidInput(_) => "InvalidInput",
            VfemError::HarnessFailure { .. } => "HarnessFailure",
            VfemError::Io(_) => "Io",
            VfemError::Csv(_) => "Csv",
            VfemError::Json(_) => "Json",
        }
    }

    /// Errors raised by the message layer rather than by the numerics.
    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            VfemError::ProtocolDesync(_) | VfemError::Schema(_) | VfemError::Transport(_)
        )
    }
}
