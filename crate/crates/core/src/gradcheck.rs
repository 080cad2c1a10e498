//! Central finite-difference check of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Errors smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

/// Relative error `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `f` at `x` against `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`.
///
/// `f` records its computation on the given tape starting from the leaf
/// holding `x` and returns the scalar output.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    check_finite(tape.value(out).item()?, "f(x)")?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let o = f(&mut t, v)?;
        t.value(o).item()
    };

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fp = check_finite(eval(plus)?, "f(x + step)")?;
        let fm = check_finite(eval(minus)?, "f(x - step)")?;
        numeric.push((fp - fm) / (2.0 * step));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        passed: max_rel_error <= tol,
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!("{what} evaluated to {v}")))
    }
}
