//! Central finite-difference verification of autograd gradients.

use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamKind, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at the worst element.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: (0, 0),
            worst_values: (0.0, 0.0),
            checked: 0,
        }
    }

    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = (input, elem);
            self.worst_values = (analytic, numeric);
        }
        self.checked += 1;
    }
}

fn scalar_output(graph: &Graph, out: Var) -> Result<f64> {
    let v = graph.value(out);
    if !v.is_scalar() {
        return Err(TensorError::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares autograd against central differences for every element of
/// every input of the scalar function `f`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        scalar_output(&g, out)
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    scalar_output(&g, out)?;
    g.backward(out)?;

    let mut report = GradCheckReport::empty();
    let mut probe = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = g.grad(var).expect("leaf requires grad").data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[k].data()[j];
            probe[k].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            report.record(k, j, a, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_err)
}

/// Finite-difference check over every trainable entry of a parameter
/// store. `loss` builds the scalar objective from bound parameters; it must
/// not mutate anything outside the graph it is handed.
pub fn grad_check_params<F>(store: &ParamStore, loss: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &mut BoundParams, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let mut bound = BoundParams::new(s);
        let out = loss(&mut g, &mut bound, s)?;
        scalar_output(&g, out)
    };

    let mut g = Graph::new();
    let mut bound = BoundParams::new(store);
    let out = loss(&mut g, &mut bound, store)?;
    scalar_output(&g, out)?;
    g.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    analytic.accumulate(&g, &bound);

    let mut probe = store.clone();
    let mut report = GradCheckReport::empty();
    for id in store.ids() {
        let entry = analytic.get(id);
        if entry.kind != ParamKind::Trainable {
            continue;
        }
        let zeros = Tensor::zeros(entry.value.shape());
        let grads = entry.grad.as_ref().unwrap_or(&zeros).data().to_vec();
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe.value(id).data()[j];
            probe.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[j] = orig;
            report.record(id.index(), j, a, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
