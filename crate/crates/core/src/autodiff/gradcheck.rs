//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale; central
/// differences at `h = 1e-5` carry roughly `1e-10` of absolute noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub max_rel_error: f64,
    /// Flat indices whose relative error exceeded the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.flagged.is_empty())
    }
}

/// Multiple of `ε·|f| / h` treated as roundoff in a central difference.
pub const ROUNDOFF_FACTOR: f64 = 16.0;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_noise(analytic, numeric, 0.0)
}

/// Relative error after discounting `noise`, the absolute roundoff expected
/// in `numeric`.
pub fn relative_error_with_noise(analytic: f64, numeric: f64, noise: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares tape gradients of `f` against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every element of every leaf.
///
/// `f` receives a fresh tape and one `Var` per leaf and returns the output;
/// non-scalar outputs are summed. Discrepancies below the difference
/// quotient's own roundoff, `ROUNDOFF_FACTOR·ε·|f|/h`, are not counted.
pub fn grad_check<F>(f: F, leaves: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 || h.is_nan() {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let total: f64 = tape.value(out).data().iter().sum();
        if !total.is_finite() {
            return Err(Error::NumericInstability(format!(
                "non-finite function value {total} while probing"
            )));
        }
        Ok(total)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = if tape.value(out).len() == 1 { out } else { tape.sum(out) };
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();

    let mut probe = leaves.to_vec();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let mut report = LeafReport {
            leaf: li,
            max_rel_error: 0.0,
            flagged: Vec::new(),
        };
        for k in 0..leaf.len() {
            let x = leaf.data()[k];
            probe[li].data_mut()[k] = x + h;
            let plus = eval(&probe)?;
            probe[li].data_mut()[k] = x - h;
            let minus = eval(&probe)?;
            probe[li].data_mut()[k] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let noise = ROUNDOFF_FACTOR * f64::EPSILON * plus.abs().max(minus.abs()) / h;
            let err = relative_error_with_noise(analytic[li].data()[k], numeric, noise);
            if !err.is_finite() {
                return Err(Error::NumericInstability(format!(
                    "non-finite gradient comparison at leaf {li} index {k}"
                )));
            }
            report.max_rel_error = report.max_rel_error.max(err);
            if err > tol {
                report.flagged.push(k);
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        leaves: reports,
        tolerance: tol,
    })
}
