//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it validates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step `h`.
    pub step: f64,
    /// Denominator floor of the relative error, so that derivatives that
    /// are zero analytically and numerically compare as equal.
    pub floor: f64,
    /// Check at most this many entries per input (evenly strided); `None` checks all.
    pub max_entries_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
            max_entries_per_input: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    /// Entries whose stencil was shrunk below `step` to stay on one smooth piece.
    pub refined: usize,
    /// Entries still straddling a kink at the smallest step.
    pub kinked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.refined += other.refined;
        self.kinked += other.kinked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `d loss / d input` for every named input, where `build` maps the
/// graph leaves (in input order) to a scalar loss.
pub fn check_gradients<F>(
    inputs: &[(String, Tensor)],
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("input requires grad");
        let stride = match opts.max_entries_per_input {
            Some(m) if m > 0 && t.numel() > m => t.numel().div_ceil(m),
            _ => 1,
        };
        for i in (0..t.numel()).step_by(stride) {
            let orig = t.data()[i];
            values[k].data_mut()[i] = orig + opts.step;
            let up = eval(&values)?;
            values[k].data_mut()[i] = orig - opts.step;
            let down = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let err = rel_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    input: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}
