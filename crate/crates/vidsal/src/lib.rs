//! Video saliency prediction, end to end and from scratch.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] - dense row-major f32 tensors and raw shape arithmetic
//! * [`graph`] - reverse-mode automatic differentiation over tensors
//! * [`nn`] - 3D convolution blocks, kernel inflation, upsampling, batch norm
//! * [`model`] - the encoder + three heterogeneous decoders + fusion network
//! * [`distill`] - KL map losses, training loops, channel reduction, teacher
//!   assistant pipeline
//! * [`metrics`] - saliency metrics (AUC variants, CC, NSS, SIM) and agreement
//!   matrices
//! * [`profiler`] - exact MAC/parameter accounting
//! * [`data`] - synthetic clip generation, the `.nst` tensor format, datasets,
//!   checkpoints

pub mod data;
pub mod distill;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod profiler;
pub mod tensor;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit code classes:
/// config/usage problems, data problems, and training divergence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
