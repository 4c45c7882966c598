//! Gradient verification against central finite differences.

use crate::error::Result;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Denominator floor for the relative error. Central differences at
/// eps ≈ 1e-5 carry roughly 1e-11 of absolute roundoff noise, so components
/// whose true gradient sits below this floor are effectively compared
/// absolutely against it.
const REL_FLOOR: f64 = 1e-3;

/// Compare reverse-mode gradients of a scalar-valued function against
/// central finite differences at `x`; returns the worst relative error.
///
/// `f` rebuilds the computation on a fresh tape from the given leaf, so the
/// same closure serves both the analytic and the perturbed evaluations.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let loss = f(&mut tape, xid)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(xid).clone();

    let eval = |point: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(point.clone());
        let l = f(&mut t, id)?;
        Ok(t.value(l).item())
    };

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let f_plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let f_minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (f_plus - f_minus) / (2.0 * eps);
        let ad = analytic.data()[i];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
