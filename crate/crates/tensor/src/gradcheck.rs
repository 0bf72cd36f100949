//! Central finite-difference verification of reverse-mode gradients.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Cap on checked elements per tensor; evenly strided when exceeded.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            max_elements: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementError {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub tolerance: f64,
    pub checked: usize,
    pub worst: Option<ElementError>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "pass" } else { "FAIL" };
        write!(f, "{status}: {} elements", self.checked)?;
        if let Some(w) = &self.worst {
            write!(
                f,
                ", worst {}[{}] analytic={:.6e} numeric={:.6e} rel={:.3e} (tol {:.0e})",
                w.tensor, w.index, w.analytic, w.numeric, w.rel_error, self.tolerance
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len && c > 0 => {
            let stride = len as f64 / c as f64;
            (0..c).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

struct Tracker {
    tolerance: f64,
    checked: usize,
    worst: Option<ElementError>,
}

impl Tracker {
    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let rel_error = relative_error(analytic, numeric);
        let replace = match &self.worst {
            None => true,
            Some(w) => rel_error > w.rel_error || rel_error.is_nan(),
        };
        if replace {
            self.worst = Some(ElementError {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
                rel_error,
            });
        }
    }

    fn finish(self) -> GradCheckReport {
        let passed = self
            .worst
            .as_ref()
            .map_or(true, |w| w.rel_error <= self.tolerance);
        GradCheckReport {
            passed,
            tolerance: self.tolerance,
            checked: self.checked,
            worst: self.worst,
        }
    }
}

/// Compares gradients of the scalar `f(inputs)` against central differences
/// with respect to every input element.
///
/// The closure may use any error type that tensor errors convert into.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut tracker = Tracker {
        tolerance: opts.tolerance,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in indices(input.numel(), opts.max_elements) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            tracker.record(&format!("input{k}"), i, analytic[k].data()[i], numeric);
        }
    }
    Ok(tracker.finish())
}

/// Same as [`grad_check`] but differentiates with respect to every
/// non-frozen parameter in `store`.
pub fn grad_check_params<F, E>(
    f: F,
    store: &ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };

    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &analytic)?;
    g.backward(out)?.accumulate_into(&mut analytic);

    let mut tracker = Tracker {
        tolerance: opts.tolerance,
        checked: 0,
        worst: None,
    };
    let mut work = store.clone();
    for (id, p) in store.iter() {
        if p.is_frozen() {
            continue;
        }
        let original = p.value().clone();
        for i in indices(original.numel(), opts.max_elements) {
            let mut perturbed = original.clone();
            perturbed.data_mut()[i] = original.data()[i] + opts.step;
            work.set_value(id, perturbed.clone())?;
            let plus = eval(&work)?;
            perturbed.data_mut()[i] = original.data()[i] - opts.step;
            work.set_value(id, perturbed)?;
            let minus = eval(&work)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            tracker.record(p.name(), i, analytic.get(id).grad().data()[i], numeric);
        }
        work.set_value(id, original)?;
    }
    Ok(tracker.finish())
}
