//! Central finite differences for checking tape gradients.
//!
//! Only forward values are evaluated here, so the numbers are independent of
//! the reverse pass they are compared against.

use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::params::{ParamId, ParamStore};

/// Denominator floor for [`max_relative_error`]; entries whose analytic and
/// numeric magnitudes are both below it are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h·eᵢ) - f(x - h·eᵢ)) / 2h` for every coordinate `i`.
pub fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| libm::fabs(a - n) / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `loss_fn` with central differences for every
/// listed parameter. Returns the worst relative error.
///
/// `loss_fn` must build a fresh graph from the given store and return the
/// graph with its scalar loss node.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], h: f64, loss_fn: F) -> f64
where
    F: Fn(&ParamStore) -> (Graph, crate::autodiff::Var),
{
    let (g, loss) = loss_fn(store);
    let grads = g.backward(loss);
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = match grads.param(id) {
            Some(m) => m.data().to_vec(),
            None => alloc::vec![0.0; store.get(id).data().len()],
        };
        let base = store.get(id).data().to_vec();
        let numeric = central_difference(&base, h, |xs| {
            let mut perturbed = store.clone();
            perturbed.get_mut(id).data_mut().copy_from_slice(xs);
            let (g, loss) = loss_fn(&perturbed);
            g.scalar_value(loss)
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}
