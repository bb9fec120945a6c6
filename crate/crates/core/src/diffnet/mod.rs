//! Small feed-forward networks with exact theta-derivatives.
//!
//! A network maps `(theta, x)` to a vector. Besides the plain forward pass the
//! engine returns the exact Jacobian of the output with respect to `theta`
//! (one forward tangent per coordinate), and back-propagates adjoints of both
//! the output and that Jacobian onto the weights. Every score-matching loss in
//! [`crate::scorematch`] is a function of those two quantities, so this is all
//! the second-order machinery training needs.

mod io;
mod net;
mod optim;

pub use io::{load_weights, read_weights, save_weights, weights_to_csv, write_weights};
pub use net::{
    forward, theta_derivatives, Activation, Evaluator, Layer, NetSpec, NetworkWeights, Scaling,
    SummedForward, ThetaDerivatives,
};
pub use optim::{AdamState, LrSchedule};

use crate::error::{Error, Result};

/// A scalar training objective over network weights.
pub trait Objective {
    /// Return the loss; when `grad` is given, add `dL/dw` into it.
    fn evaluate(&self, spec: &NetSpec, w: &[f64], grad: Option<&mut [f64]>) -> Result<f64>;
}

/// Loss and its exact weight gradient.
pub fn loss_and_grad<O: Objective + ?Sized>(
    spec: &NetSpec,
    w: &NetworkWeights,
    objective: &O,
) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    w.check(spec)?;
    let mut grad = vec![0.0; w.len()];
    let loss = objective.evaluate(spec, w.as_slice(), Some(&mut grad))?;
    if !loss.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::non_finite(format!("gradient[{i}]")));
    }
    Ok((loss, grad))
}

/// Loss value only.
pub fn loss_value<O: Objective + ?Sized>(spec: &NetSpec, w: &NetworkWeights, objective: &O) -> Result<f64> {
    w.check(spec)?;
    let loss = objective.evaluate(spec, w.as_slice(), None)?;
    if !loss.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    Ok(loss)
}
