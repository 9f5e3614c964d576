//! Central finite-difference gradient checks.

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore, Parameterized};
use crate::tensor::TensorError;

/// Relative error of one parameter tensor: `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compares analytic gradients of `loss` with central differences of step
/// `h` for every parameter of `model`. `loss` must be deterministic.
pub fn check<M, F, E>(model: &M, h: f64, loss: F) -> Result<Vec<ParamCheck>, E>
where
    M: Parameterized<f64> + Clone,
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a M) -> Result<Var, E>,
    E: From<TensorError>,
{
    let store = model.params();
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::new();
        let l = loss(&mut g, model)?;
        let grads = g.backward(l)?;
        store
            .ids()
            .map(|id| grads.param(id).map(|t| t.data().to_vec()))
            .collect()
    };
    let eval = |m: &M| -> Result<f64, E> {
        let mut g = Graph::no_grad();
        let l = loss(&mut g, m)?;
        Ok(g.value(l).data()[0])
    };
    let mut work = model.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        let a = analytic[id.0].clone().unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[k];
            work.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work.params_mut().get_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        out.push(summarize(store, id, &a, &numeric));
    }
    Ok(out)
}

fn summarize(store: &ParamStore<f64>, id: ParamId, a: &[f64], n: &[f64]) -> ParamCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    ParamCheck {
        name: store.name(id).to_string(),
        rel_error: norm(&diff) / (norm(a) + norm(n)).max(1e-12),
        analytic_norm: norm(a),
    }
}
