use alloc::string::String;

use crate::TaskId;

/// Errors raised anywhere in the zipping pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("matrix is not positive definite even with damping {damping:e}")]
    FactorizationFailed { damping: f64 },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("layer index {index} out of range (valid 1..={max})")]
    LayerOutOfRange { index: usize, max: usize },
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("empty dataset or batch")]
    EmptyData,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },
    #[error("infeasible sharing target at layer {layer}: requested {requested}, at most {available} pairs available")]
    InfeasibleTarget {
        layer: usize,
        requested: usize,
        available: usize,
    },
    #[error("incompatible architectures: {0}")]
    Incompatible(String),
    #[error("mask/weight inconsistency: {0}")]
    MaskInconsistent(String),
    #[error("residual block at layer {layer} requires its input layer to be fully merged")]
    ResidualPrecondition { layer: usize },
    #[error("layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_layer(self, layer: usize) -> Self {
        match self {
            e @ Error::AtLayer { .. } => e,
            e => Error::AtLayer {
                layer,
                source: alloc::boxed::Box::new(e),
            },
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn ensure_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
