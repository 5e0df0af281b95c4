use alloc::string::String;

use thiserror::Error;

pub use crate::drpm::DrpmError;
pub use crate::evaluation::{IntegrityError, MetricError};
pub use crate::features::FeatureError;
pub use crate::protocol::{ProtocolError, SamplingError};
pub use crate::prototype::PrototypeError;
pub use crate::training::TrainingError;

/// Shape and configuration failures of the learnable modules.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("input shape {found:?} does not match configured {expected:?}")]
    InputShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("vector length {found} does not match embedding width {expected}")]
    Width { expected: usize, found: usize },
    #[error("cannot classify against an empty prototype matrix")]
    EmptyPrototypes,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Drpm(#[from] DrpmError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Integrity(#[from] IntegrityError),
}
