//! Central finite-difference verification of analytic gradients.

use crate::error::{AutogradError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Index of the first element whose perturbed evaluation was not finite.
    pub non_finite_at: Option<usize>,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// against central differences with step [`FD_STEP`].
pub fn grad_check<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let input = tape.variable(x.clone());
    let out = f(&tape, input)?;
    if out.numel() != 1 {
        return Err(AutogradError::NonScalarLoss { shape: out.shape() });
    }
    let base = out.item();
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(&input)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        Ok(f(&tape, v)?.item())
    };

    let mut numeric = vec![0.0; x.numel()];
    let mut non_finite_at = if base.is_finite() { None } else { Some(0) };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        numeric[i] = (fp - fm) / (2.0 * FD_STEP);
        if non_finite_at.is_none() && !(numeric[i].is_finite() && analytic[i].is_finite()) {
            non_finite_at = Some(i);
        }
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0_f64), |best, (i, e)| {
            if e > best.1 || e.is_nan() {
                (i, if e.is_nan() { f64::INFINITY } else { e })
            } else {
                best
            }
        });

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        passed: non_finite_at.is_none() && max_rel_error < tol,
        analytic,
        numeric,
        non_finite_at,
        tol,
    })
}
