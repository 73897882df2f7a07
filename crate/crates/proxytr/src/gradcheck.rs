//! Finite-difference gradient verification.
//!
//! The harness is deliberately independent of the backward pass: it only
//! evaluates the loss forward at perturbed parameter values and compares the
//! central-difference quotient against whatever gradients the caller has
//! accumulated in the store.
//!
//! A value passes when the difference is within `rtol` relative error, or
//! below the oracle's own resolution: central differences in f64 carry
//! rounding noise of about `eps * |loss| / step`, so gradients smaller than
//! that cannot be resolved and are compared absolutely against it.

use crate::tensor::{Element, ParamStore};

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error among values that exceeded the noise floor.
    pub worst_rel: f64,
    /// Parameter name and flat offset of the worst value.
    pub worst_at: String,
    /// Total scalar parameters checked.
    pub checked: usize,
    pub passed: bool,
}

/// Compare accumulated analytic gradients against central finite differences
/// of `loss_fn` over every scalar parameter in the store.
///
/// The caller runs forward + backward + `accumulate_grads` first; `loss_fn`
/// must re-evaluate the same loss from scratch (it is called with the store
/// temporarily perturbed).
pub fn check_gradients<E: Element>(
    store: &mut ParamStore<E>,
    mut loss_fn: impl FnMut(&ParamStore<E>) -> f64,
    step: f64,
    rtol: f64,
) -> GradCheckReport {
    let base_loss = loss_fn(store).abs();
    // Central-difference resolution: f64 rounding of the two loss values,
    // with an 8x safety factor.
    let atol = 8.0 * f64::EPSILON * base_loss.max(1.0) / step;
    let mut worst_rel = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0usize;
    let ids: Vec<_> = store.ids().collect();
    for pid in ids {
        let n = store.data(pid).len();
        for flat in 0..n {
            let analytic = store.grad(pid)[flat].to_f64();
            let h = E::from_f64(step);
            store.perturb(pid, flat, h);
            let plus = loss_fn(store);
            store.perturb(pid, flat, E::from_f64(-2.0 * step));
            let minus = loss_fn(store);
            store.perturb(pid, flat, h);
            let numeric = (plus - minus) / (2.0 * step);
            checked += 1;
            let diff = (analytic - numeric).abs();
            if diff <= atol {
                continue;
            }
            let rel = diff / analytic.abs().max(numeric.abs()).max(1e-12);
            if rel > worst_rel {
                worst_rel = rel;
                worst_at = format!("{}[{flat}]", store.name(pid));
            }
        }
    }
    GradCheckReport {
        worst_rel,
        worst_at,
        checked,
        passed: worst_rel < rtol,
    }
}
