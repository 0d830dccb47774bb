//! Numeric substrate: matrices, dense and bidirectional LSTM layers with
//! exact backpropagation, and a finite-difference gradient checker.

mod blstm;
mod dense;
mod gradcheck;
mod lstm;
mod matrix;

pub use blstm::{BlstmCache, BlstmLayer};
pub use dense::{Activation, DenseCache, DenseLayer};
pub use gradcheck::{grad_check, BlockError, GradCheckReport};
pub use lstm::{LstmCache, LstmCell};
pub use matrix::Matrix;

pub(crate) use matrix::axpy;

use crate::error::{Error, Result};

/// Gradients for each parameter block, aligned with [`Layer::param_blocks`].
pub type ParamGrads = Vec<Vec<f64>>;

/// A differentiable map from one frame sequence to another.
pub trait Layer {
    type Cache;

    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Forward pass keeping whatever the backward pass needs.
    fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, Self::Cache)>;

    /// Returns the input gradient and per-block parameter gradients.
    fn backward_cached(&self, cache: &Self::Cache, dy: &Matrix) -> Result<(Matrix, ParamGrads)>;

    /// Named parameter blocks in a fixed order.
    fn param_blocks(&self) -> Vec<(String, &[f64])>;
    fn param_blocks_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<(Matrix, ParamGrads)> {
        let (y, cache) = self.forward_cached(x)?;
        check_same_shape("upstream gradient", &y, dy)?;
        self.backward_cached(&cache, dy)
    }

    fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

pub(crate) fn check_width(context: &str, x: &Matrix, expected: usize) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::shape(context, expected, x.cols()));
    }
    Ok(())
}

pub(crate) fn check_same_shape(context: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            format!("{context} frames"),
            a.rows(),
            b.rows(),
        ));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape(format!("{context} width"), a.cols(), b.cols()));
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
