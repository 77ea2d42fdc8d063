//! Central finite-difference checks against tape gradients.

use crate::params::{ParamId, ParamStore};

/// One sampled coordinate: analytic vs. central-difference derivative.
#[derive(Clone, Copy, Debug)]
pub struct GradSample {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|)`, or the absolute gap when both are below `floor`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        let diff = (self.analytic - self.numeric).abs();
        if scale < floor {
            diff
        } else {
            diff / scale
        }
    }
}

/// Perturbs `coords` of `store` by ±`step` and compares `(f(+) - f(-)) / 2·step`
/// against the analytic gradients already accumulated in `store`.
pub fn central_differences<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    step: f64,
    mut f: F,
) -> Vec<GradSample>
where
    F: FnMut(&ParamStore) -> f64,
{
    coords
        .iter()
        .map(|&(param, index)| {
            let analytic = store.grad(param).as_slice_memory_order().unwrap()[index];
            let orig = store.value(param).as_slice_memory_order().unwrap()[index];
            store.value_mut(param).as_slice_memory_order_mut().unwrap()[index] = orig + step;
            let plus = f(store);
            store.value_mut(param).as_slice_memory_order_mut().unwrap()[index] = orig - step;
            let minus = f(store);
            store.value_mut(param).as_slice_memory_order_mut().unwrap()[index] = orig;
            GradSample {
                param,
                index,
                analytic,
                numeric: (plus - minus) / (2.0 * step),
            }
        })
        .collect()
}
