//! Dense f64 primitives, the parameter store, Adam, and gradient checking.
//!
//! Every differentiable operation in the crate writes its gradients by hand
//! into a [`Gradients`] buffer shaped like a [`ParamStore`]; the checker in
//! [`gradcheck`] compares those against central differences.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod matrix;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, NamedTensor, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::finite_diff_check;
pub use matrix::{axpy, dot, norm, Matrix};
pub use params::{Gradients, ParamId, ParamStore};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Lower/upper clamp applied to every probability before a log.
pub const PROB_EPS: f64 = 1e-7;

/// Sigmoid clamped to `[PROB_EPS, 1 - PROB_EPS]`, with the derivative of the
/// clamped value w.r.t. the logit (zero where the clamp is active).
pub fn clamped_sigmoid(x: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if p < PROB_EPS {
        (PROB_EPS, 0.0)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, 0.0)
    } else {
        (p, p * (1.0 - p))
    }
}
