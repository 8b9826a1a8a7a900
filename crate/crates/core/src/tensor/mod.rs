//! Dense `f64` arrays, a reverse-mode tape over them, and Adam.

mod adam;
pub mod gradcheck;
pub(crate) mod kernels;
mod tape;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use kernels::normal_cdf;
pub use tape::{Gradients, Mode, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("loss must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("contract violated: {0}")]
    Contract(&'static str),
    #[error("internal tape error: {0}")]
    Internal(&'static str),
}

/// A named dense array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape { op: "tensor", lhs: shape, rhs: vec![data.len()] });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Tensor { name: name.into(), shape, data, requires_grad: true, grad: None })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { name: name.into(), shape, data: vec![0.0; n], requires_grad: true, grad: None }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Views the array as a matrix: rank-1 arrays become one row, higher
    /// ranks fold leading dimensions into rows.
    pub fn as_matrix(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [.., last] => (self.data.len() / last, *last),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }
}

/// Copies tape gradients into the parameters' `grad` fields.
pub fn assign_grads(params: &mut [Tensor], grads: &Gradients) {
    for (p, g) in params.iter_mut().zip(&grads.slots) {
        p.grad = Some(g.clone());
    }
}
