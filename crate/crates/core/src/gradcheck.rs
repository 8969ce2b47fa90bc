//! Central finite-difference oracle for graph gradients.
//!
//! Compiled only with the `gradcheck` feature; test suites across the
//! workspace use it to validate every backward rule in 64-bit precision.

use crate::graph::{Graph, Mode, Var};
use crate::nn::ParamStore;
use crate::tensor::rng_from_seed;
use crate::{Result, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Below it the error is absolute;
/// the rounding noise of a central difference at `STEP` on an O(10) loss is
/// about 1e-10, so exactly-zero gradients still compare well under 1e-4.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `"<tensor>[<flat index>]"` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = e;
            self.worst = label();
        }
    }
}

/// Loss projection that makes every output element matter: `sum(y * R)`
/// with `R` a fixed pseudo-random tensor of the shape of `y`.
pub fn weighted_sum(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.shape(y), 0.0, 1.0, &mut rng_from_seed(seed ^ 0x5eed));
    let r = g.input(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn sample(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

/// Compares autodiff gradients of `loss_fn` with respect to every parameter
/// of `store` and every tensor of `inputs` against central differences.
///
/// `loss_fn` receives a graph with `store` bound and the inputs as
/// variables, and must return a scalar. At most `max_per_tensor` entries of
/// each tensor are probed, evenly spread.
pub fn check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    max_per_tensor: usize,
    loss_fn: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(mode);
        g.bind(store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(mode);
    g.bind(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradReport::default();
    let mut probe = store.clone();
    for (id, entry) in store.ids().zip(store.entries()) {
        let analytic = grads.param(id);
        for j in sample(entry.value.numel(), max_per_tensor) {
            let x0 = entry.value.data()[j];
            probe.get_mut(id).data_mut()[j] = x0 + STEP;
            let up = eval(&probe, inputs)?;
            probe.get_mut(id).data_mut()[j] = x0 - STEP;
            let down = eval(&probe, inputs)?;
            probe.get_mut(id).data_mut()[j] = x0;
            let a = analytic.map_or(0.0, |t| t.data()[j]);
            report.record(
                || format!("{}[{j}]", entry.name),
                a,
                (up - down) / (2.0 * STEP),
            );
        }
    }

    let mut probe_in = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in sample(t.numel(), max_per_tensor) {
            let x0 = t.data()[j];
            probe_in[i].data_mut()[j] = x0 + STEP;
            let up = eval(store, &probe_in)?;
            probe_in[i].data_mut()[j] = x0 - STEP;
            let down = eval(store, &probe_in)?;
            probe_in[i].data_mut()[j] = x0;
            let a = analytic.map_or(0.0, |t| t.data()[j]);
            report.record(|| format!("input{i}[{j}]"), a, (up - down) / (2.0 * STEP));
        }
    }
    Ok(report)
}
