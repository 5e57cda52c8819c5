//! Central finite-difference gradient checking.
//!
//! Independent of the tape's backward pass: it only evaluates the forward
//! function at perturbed inputs.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst discrepancy found by [`check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, element)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Numerical gradient of `f` at `inputs` by central differences.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let mut out = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares tape gradients of the scalar `f` against central differences.
pub fn check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let numeric = numeric_gradient(&f, inputs, step)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, (var, num)) in vars.iter().zip(&numeric).enumerate() {
        let analytic = grads
            .wrt(*var)
            .unwrap_or_else(|| Tensor::zeros(num.shape()));
        for (j, (&a, &n)) in analytic.data().iter().zip(num.data()).enumerate() {
            let rel = relative_error(a, n);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
