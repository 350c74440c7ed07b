//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Per-input outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub label: String,
    pub inputs: Vec<InputCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `build` records the function on a fresh tape given one leaf per input
/// (all requiring gradients) and returns the scalar root.
pub fn check<F>(label: &str, inputs: &[(&str, Tensor)], step: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradReport {
        label: label.to_string(),
        inputs: Vec::with_capacity(inputs.len()),
    };
    for (idx, (name, _)) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for e in 0..values[idx].len() {
            let orig = values[idx].data()[e];
            values[idx].data_mut()[e] = orig + step;
            let plus = eval(&values)?;
            values[idx].data_mut()[e] = orig - step;
            let minus = eval(&values)?;
            values[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[idx].data()[e], numeric));
        }
        report.inputs.push(InputCheck {
            name: name.to_string(),
            entries: values[idx].len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
