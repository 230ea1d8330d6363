//! Finite-difference gradient checking.

use std::sync::Arc;

use super::array::Array;
use super::tape::{NodeId, Tape};
use super::AdError;

/// Compares the analytic gradient of a scalar-valued function against
/// central finite differences.
///
/// Returns `max_i |analytic_i - fd_i| / max(1, |fd_i|)` over the
/// coordinates of `x`.
pub fn grad_check<F>(f: &F, x: &Array, step: f64) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, AdError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");

    let eval = |point: &Array| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Arc::new(point.clone()));
        let loss = f(&mut tape, leaf)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(AdError::NonScalarLoss(v.shape().to_vec()));
        }
        let out = v.item();
        if !out.is_finite() {
            return Err(AdError::NonFiniteLoss);
        }
        Ok(out)
    };

    // Analytic gradient at x.
    let mut tape = Tape::new();
    let leaf = tape.leaf(Arc::new(x.clone()));
    let loss = f(&mut tape, leaf)?;
    if !tape.value(loss).is_scalar() {
        return Err(AdError::NonScalarLoss(tape.value(loss).shape().to_vec()));
    }
    if !tape.value(loss).item().is_finite() {
        return Err(AdError::NonFiniteLoss);
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Array::zeros(x.shape()));

    let mut max_err: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        if !fd.is_finite() {
            return Err(AdError::NonFiniteLoss);
        }
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
