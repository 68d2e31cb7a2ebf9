//! Dense f64 arrays with reverse-mode automatic differentiation and Adam.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in exact reverse order, accumulating gradients into every
//! node that (transitively) depends on a trainable parameter. Parameters
//! live in a [`ParamRegistry`] grouped by name prefix so whole groups can be
//! frozen during fine-tuning.

mod registry;
mod tape;

pub mod gradcheck;

pub use registry::{AdamConfig, ParamRegistry};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },
    #[error("{op}: row {row} has no unmasked positions")]
    AllMasked { op: &'static str, row: usize },
    #[error("gradient missing for unfrozen parameter {name:?}")]
    MissingGrad { name: String },
    #[error("parameter {name:?} is already registered")]
    DuplicateParam { name: String },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
}

/// Shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}
