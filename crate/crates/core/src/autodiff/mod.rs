//! Minimal reverse-mode differentiation over dense f64 matrices, sized for
//! the toy networks and the optimisation baseline.

mod attention;
mod graph;
mod nn;
mod params;
mod tensor;

pub use attention::{linear_attention, linear_attention_direct, ATTENTION_EPS};
pub use graph::{Gradients, Graph, Unary, Var};
pub use nn::{LayerNormParams, Linear};
pub use params::{Adam, Optimizer, ParamId, ParamStore, Sgd};
pub use tensor::Tensor;

use crate::error::Result;

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that exact zeros compare
/// cleanly.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    d / a.abs().max(b.abs()).max(1e-6)
}

/// Compare backward-pass gradients with central differences for every
/// scalar of every parameter in `store` (or at most `max_per_param` evenly
/// strided entries per parameter when set).
pub fn check_gradients(
    store: &mut ParamStore,
    eps: f64,
    max_per_param: Option<usize>,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in 0..store.len() {
        let n = store.value(id).len();
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let orig = store.value(id).data[k];
            store.value_mut(id).data[k] = orig + eps;
            let mut gp = Graph::new();
            let lp = f(&mut gp, store)?;
            let fp = gp.value(lp).item();
            store.value_mut(id).data[k] = orig - eps;
            let mut gm = Graph::new();
            let lm = f(&mut gm, store)?;
            let fm = gm.value(lm).item();
            store.value_mut(id).data[k] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |t| t.data[k]);
            let rel = relative_error(analytic, numeric);
            worst.checked += 1;
            if rel > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: rel,
                    param: id,
                    index: k,
                    analytic,
                    numeric,
                    checked: worst.checked,
                };
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
