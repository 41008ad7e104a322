//! Central finite-difference oracle for the backward rules.
//!
//! The relative error of one entry is
//! `|analytic - numeric| / (|analytic| + 1e-8)` with
//! `numeric = (f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Denominator guard of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + REL_ERROR_FLOOR)
}

/// Worst entry found by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            worst_param: String::new(),
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst_param = name.to_string();
            self.worst_index = index;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    g.value(out).item()
}

/// Maximum relative error between the tape gradient of the scalar function
/// `f` at `x` and central differences with step `eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of a loss over named parameters. `loss` builds
/// the full forward on a fresh tape and returns the scalar loss node.
/// `entries` lists `(parameter, flat index)` pairs to probe; `None` probes
/// every scalar.
pub fn param_grad_check<F>(
    params: &ParamSet,
    loss: F,
    eps: f64,
    entries: Option<&[(String, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, params)?;
    let grads = g.backward(out)?.for_params(params);

    let all: Vec<(String, usize)>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = params
                .iter()
                .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i)))
                .collect();
            &all
        }
    };

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, p)?;
        g.value(out).item()
    };

    let mut report = GradCheckReport::empty();
    let mut probe = params.clone();
    for (name, index) in entries {
        let orig = probe.require(name)?.data()[*index];
        probe.get_mut(name).expect("checked").data_mut()[*index] = orig + eps;
        let plus = eval(&probe)?;
        probe.get_mut(name).expect("checked").data_mut()[*index] = orig - eps;
        let minus = eval(&probe)?;
        probe.get_mut(name).expect("checked").data_mut()[*index] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        report.record(name, *index, grads[name].data()[*index], numeric);
    }
    Ok(report)
}
