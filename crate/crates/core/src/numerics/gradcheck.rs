//! Central-difference gradient checking.

use crate::error::{Error, Result};

use super::{Gradients, ParamStore};

/// Compares the analytic gradient produced by `loss_fn` against central
/// differences `(L(w+h) − L(w−h)) / 2h`, coordinate by coordinate, and
/// returns the worst relative error
/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
///
/// `loss_fn` must return the loss at the given parameters and add its
/// gradient into the supplied buffer. It is called once for the analytic
/// pass and twice per scalar for the probes.
pub fn finite_diff_check<F>(store: &ParamStore, h: f64, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Gradients) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let mut analytic = store.zeros_like();
    let base = loss_fn(store, &mut analytic)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteProbe);
    }

    let mut probe = store.clone();
    let mut scratch = store.zeros_like();
    let mut worst = 0.0f64;
    for id in store.ids() {
        for k in 0..store.value(id).len() {
            let w = store.value(id).as_slice()[k];

            probe.value_mut(id).as_mut_slice()[k] = w + h;
            let plus = loss_fn(&probe, &mut scratch)?;
            probe.value_mut(id).as_mut_slice()[k] = w - h;
            let minus = loss_fn(&probe, &mut scratch)?;
            probe.value_mut(id).as_mut_slice()[k] = w;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteProbe);
            }

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).as_slice()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
        scratch.zero();
    }
    Ok(worst)
}
