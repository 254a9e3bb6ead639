//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that near-zero gradients are
/// compared on an absolute scale instead of amplifying rounding noise.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Tensor index and flat element where `max_rel_err` occurred. Free
    /// inputs come first, then parameters in store order.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Elements whose finite differences straddle a non-differentiable point
    /// (see [`is_kink`]); excluded from the error maxima.
    pub kinks: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: (0, 0),
            checked: 0,
            kinks: 0,
        }
    }

    fn record(&mut self, tensor: usize, elem: usize, analytic: f64, numeric: f64) {
        let rel = rel_err(analytic, numeric);
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = (tensor, elem);
        }
        self.checked += 1;
    }

    /// `probes` holds `f` at `x + eps`, `x - eps`, `x + eps/2`, `x - eps/2`.
    fn probe(&mut self, tensor: usize, elem: usize, analytic: f64, f0: f64, probes: [f64; 4], eps: f64) {
        let [plus, minus, plus_half, minus_half] = probes;
        if is_kink(f0, plus, minus, plus_half, minus_half, eps) {
            self.kinks += 1;
        } else {
            self.record(tensor, elem, analytic, (plus - minus) / (2.0 * eps));
        }
    }
}

/// Whether `f` has a slope discontinuity inside `[x - eps, x + eps]`.
///
/// The three second differences over the stencil `x + {-1, -1/2, 0, 1/2, 1} eps`
/// agree to third order for smooth `f`; a kink puts a tent into them. Only
/// kinks large enough to move the central difference by `KINK_TOL` relative
/// to its magnitude (floored at 1) are reported.
pub fn is_kink(f0: f64, plus: f64, minus: f64, plus_half: f64, minus_half: f64, eps: f64) -> bool {
    let d = [minus - 2.0 * minus_half + f0, minus_half - 2.0 * f0 + plus_half, f0 - 2.0 * plus_half + plus];
    let spread = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min);
    let slope = ((plus - minus) / (2.0 * eps)).abs();
    spread / (eps / 2.0) > KINK_TOL * slope.max(1.0)
}

pub const KINK_TOL: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward-mode gradients of `f` against central differences.
///
/// `f` receives one free leaf per input tensor and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    check_gradients_with_params(inputs, &store, eps, None, |g, _, v| f(g, v))
}

/// As [`check_gradients`], also perturbing every parameter in `store`.
///
/// With `max_per_tensor = Some(k)`, at most `k` evenly strided elements of
/// each tensor are checked.
pub fn check_gradients_with_params<F>(
    inputs: &[Tensor],
    store: &ParamStore,
    eps: f64,
    max_per_tensor: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], params: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, params, &vars)?;
        let v = g.value(root);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        Ok(v.item())
    };
    let pick = |numel: usize| -> Vec<usize> {
        match max_per_tensor {
            Some(k) if k < numel => (0..k).map(|i| i * numel / k).collect(),
            _ => (0..numel).collect(),
        }
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = f(&mut g, store, &vars)?;
    let grads = g.backward(root)?;
    let f0 = g.value(root).item();

    let mut report = GradCheckReport::empty();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = grads.var(*v).unwrap_or(&zeros).to_vec();
        for j in pick(inputs[i].numel()) {
            let orig = inputs[i].data()[j];
            let mut at = |d: f64| -> Result<f64> {
                work[i].data_mut()[j] = orig + d;
                let v = eval(&work, store);
                work[i].data_mut()[j] = orig;
                v
            };
            let probes = [at(eps)?, at(-eps)?, at(eps / 2.0)?, at(-eps / 2.0)?];
            report.probe(i, j, analytic[j], f0, probes, eps);
        }
    }

    let mut params = store.clone();
    for (k, id) in store.ids().enumerate() {
        let analytic = grads.param(store, id).into_owned();
        for j in pick(store.get(id).numel()) {
            let orig = store.get(id).data()[j];
            let mut at = |d: f64| -> Result<f64> {
                params.get_mut(id).data_mut()[j] = orig + d;
                let v = eval(inputs, &params);
                params.get_mut(id).data_mut()[j] = orig;
                v
            };
            let probes = [at(eps)?, at(-eps)?, at(eps / 2.0)?, at(-eps / 2.0)?];
            report.probe(inputs.len() + k, j, analytic[j], f0, probes, eps);
        }
    }
    Ok(report)
}
