//! Central finite-difference checks of analytic parameter gradients.

use rand::seq::index;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamStore, Session};
use crate::error::{contract_err, Result};

pub const FD_STEP: f64 = 1e-5;

/// Below this magnitude, errors are measured absolutely rather than
/// relative to the gradient.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares backprop gradients of `loss` against central differences on up
/// to `per_param` randomly chosen coordinates of every parameter.
pub fn check_params<F>(store: &mut ParamStore<f64>, per_param: usize, rng: &mut impl Rng, loss: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&Session<'g, f64>) -> Result<Var<'g, f64>>,
{
    let analytic = {
        let g = Graph::new();
        let s = Session::new(&g, store);
        let l = loss(&s)?;
        let mut grads = g.backward(l)?;
        s.param_grads(&mut grads)
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let s = Session::frozen(&g, store);
        Ok(loss(&s)?.value().item())
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let n = store.value(id).numel();
        let coords = index::sample(rng, n, per_param.min(n)).into_vec();
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + FD_STEP;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig - FD_STEP;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[c]);
            let e = rel_err(a, numeric);
            if !e.is_finite() {
                return Err(contract_err!("non-finite gradient for {}[{c}]", store.get(id).name));
            }
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{c}] analytic {a:e} numeric {numeric:e}", store.get(id).name);
            }
        }
    }
    Ok(report)
}
