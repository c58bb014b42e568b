//! Finite-difference verification of tape gradients.
//!
//! Central differences at double precision are compared component-wise
//! against the reverse-mode result. Components where the one-sided
//! derivatives disagree are flagged as kink points (relu/maxpool
//! nondifferentiability) and excluded rather than failed.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// One-sided derivative disagreement above this marks a kink.
    pub kink_tol: f64,
    /// Floor for the relative-error denominator, guarding near-zero gradients.
    pub rel_guard: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            step: 1e-5,
            tol: 1e-5,
            kink_tol: 1e-3,
            rel_guard: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Components skipped because the scalar function is not differentiable
    /// there (one-sided derivatives disagree).
    pub excluded: Vec<(usize, usize)>,
    pub failures: Vec<ComponentCheck>,
    pub worst: Option<ComponentCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "checked {} components, max rel err {:.3e} (tol {:.1e}), {} excluded, {} failures",
            self.checked,
            self.max_rel_err,
            self.tol,
            self.excluded.len(),
            self.failures.len()
        )
    }
}

/// Checks the gradients of a scalar-valued tensor function `f` with respect
/// to every component of `inputs`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], settings: &GradCheckSettings, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect::<Result<_>>()?;
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    // Analytic gradients from one recorded pass.
    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect::<Result<_>>()?;
        let root = f(&mut tape, &vars)?;
        tape.backward(root)?;
        vars.iter().map(|v| tape.grad_or_zeros(*v)).collect()
    };

    let h = settings.step;
    let base = eval(inputs)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        tol: settings.tol,
        checked: 0,
        max_rel_err: 0.0,
        excluded: Vec::new(),
        failures: Vec::new(),
        worst: None,
    };

    for (ti, tensor) in inputs.iter().enumerate() {
        for j in 0..tensor.numel() {
            let x0 = tensor.data()[j];
            work[ti].data_mut()[j] = x0 + h;
            let f_plus = eval(&work)?;
            work[ti].data_mut()[j] = x0 - h;
            let f_minus = eval(&work)?;
            work[ti].data_mut()[j] = x0;

            let d_plus = (f_plus - base) / h;
            let d_minus = (base - f_minus) / h;
            if (d_plus - d_minus).abs()
                > settings.kink_tol * d_plus.abs().max(d_minus.abs()).max(1.0)
            {
                report.excluded.push((ti, j));
                continue;
            }

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[ti].data()[j];
            let rel_err =
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(settings.rel_guard);
            report.checked += 1;
            let record = ComponentCheck {
                input: ti,
                index: j,
                analytic: a,
                numeric,
                rel_err,
            };
            if rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = Some(record.clone());
            }
            if rel_err >= settings.tol {
                report.failures.push(record);
            }
        }
    }
    Ok(report)
}
