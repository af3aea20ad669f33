use thiserror::Error;

use crate::data::ConceptId;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown concept id {0}")]
    UnknownConcept(ConceptId),

    #[error("duplicate concept id {0}")]
    DuplicateConcept(ConceptId),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("timestep {t} out of range [0, {steps})")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("concepts are not separable: held-out probe accuracy {accuracy:.4} below floor {floor}")]
    Inseparable { accuracy: f64, floor: f64 },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numbers themselves rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
