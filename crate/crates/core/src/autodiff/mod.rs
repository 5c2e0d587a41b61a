//! Reverse-mode differentiation over small dense tensors.
//!
//! Build a [`Tape`], register parameters with [`Tape::param`] and inputs with
//! [`Tape::constant`], compose [`Var`] operations, then call
//! [`Tape::backward`] on a scalar. Broadcasting exists only over the leading
//! (batch) axis: an operand with one row combines with an operand of `B`
//! rows.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}
