//! Dense tensors and a reverse-mode tape, in `f64` throughout.

mod tape;
mod tensor;

pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidTensor { shape: Vec<usize>, len: usize },
    #[error("{op}: empty graph (no rows to pool)")]
    EmptyGraph { op: &'static str },
    #[error("{op}: row index {index} out of range for {rows} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("tape already consumed by backward; reset it first")]
    TapeSealed,
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` as `max(t, 0) + ln(1 + e^-|t|)`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Central-difference estimate of the gradient of a scalar function.
///
/// Each coordinate `i` costs two evaluations, at `x + h e_i` and `x - h e_i`.
/// Errors from `f` propagate unchanged; a non-finite value is reported through
/// `on_non_finite`.
pub fn finite_diff_gradient<E>(
    mut f: impl FnMut(&Tensor) -> Result<f64, E>,
    x: &Tensor,
    h: f64,
    on_non_finite: impl Fn() -> E,
) -> Result<Tensor, E> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(on_non_finite());
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
