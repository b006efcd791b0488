//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use crate::autodiff::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// `|a - n| <= max(rel * max(|a|, |n|), abs)`.
pub fn close(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= (rel_tol * analytic.abs().max(numeric.abs())).max(abs_tol)
}

/// Compares gradients of `f` w.r.t. each tensor in `inputs`.
///
/// `f` receives a fresh graph and one leaf per input and must return a
/// scalar. Inputs listed in `differentiable` get `requires_grad`; the others
/// are passed as constants and skipped.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    differentiable: &[bool],
    config: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| g.leaf(t.clone(), d))
        .collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        if !differentiable[idx] {
            continue;
        }
        let analytic = g
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
        for e in 0..inputs[idx].numel() {
            let orig = inputs[idx].data()[e];
            probe[idx].data_mut()[e] = orig + config.step;
            let plus = eval(&probe)?;
            probe[idx].data_mut()[e] = orig - config.step;
            let minus = eval(&probe)?;
            probe[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.data()[e];
            let abs_err = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs_err);
            if abs_err > config.abs_tol {
                report.max_rel_err = report.max_rel_err.max(abs_err / a.abs().max(numeric.abs()));
            }
            if !close(a, numeric, config.rel_tol, config.abs_tol) {
                report.mismatches.push(Mismatch {
                    input: idx,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
