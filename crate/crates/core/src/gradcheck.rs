//! Central finite-difference checks of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Magnitude below which errors are measured absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Worst disagreement found by a check.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = e;
            self.worst = format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", label());
        }
    }
}

/// Evenly spaced sample of at most `max` indices below `len`.
fn sample(len: usize, max: usize) -> impl Iterator<Item = usize> {
    let stride = len.div_ceil(max.max(1)).max(1);
    (0..len).step_by(stride)
}

fn scalar(g: &Graph<'_, f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Compares parameter gradients of the scalar built by `f` with central
/// differences of step `h`, probing at most `per_param` entries of each
/// parameter tensor.
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, per_param: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;
    let mut work = store.clone();
    let mut out = GradCheck::default();
    for id in store.ids() {
        let zero = Tensor::zeros(store.get(id).shape());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        for k in sample(analytic.len(), per_param) {
            let orig = work.get(id).data()[k];
            let mut eval = |x: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[k] = x;
                let mut g = Graph::inference(&work);
                let v = f(&mut g)?;
                Ok(scalar(&g, v))
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            work.get_mut(id).data_mut()[k] = orig;
            out.record(|| format!("{}[{k}]", store.name(id)), analytic.data()[k], numeric);
        }
    }
    Ok(out)
}

/// As [`check_params`] but for the gradient with respect to each input
/// tensor passed to `f` as a variable.
pub fn check_inputs<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    per_input: usize,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut out = GradCheck::default();
    for (i, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.wrt(vars[i]).unwrap_or(&zero).clone();
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for k in sample(input.len(), per_input) {
            let orig = input.data()[k];
            let mut eval = |x: f64| -> Result<f64> {
                work[i].data_mut()[k] = x;
                let mut g = Graph::inference(store);
                let vs: Vec<Var> = work.iter().map(|t| g.constant(t.clone())).collect();
                let v = f(&mut g, &vs)?;
                Ok(scalar(&g, v))
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            work[i].data_mut()[k] = orig;
            out.record(|| format!("input{i}[{k}]"), analytic.data()[k], numeric);
        }
    }
    Ok(out)
}
