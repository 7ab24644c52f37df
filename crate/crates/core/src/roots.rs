//! Scalar bracketed root finding and unimodal minimization.
//!
//! The edge and inverse-subordination computations only ever solve smooth,
//! monotone scalar equations on explicit brackets, so a safeguarded
//! secant/bisection hybrid is all that is needed.

use crate::error::{Error, Result};

/// Finds the root of `f` inside `[lo, hi]`, which must bracket a sign
/// change. Secant steps are taken when they stay inside the current
/// bracket and shrink it; otherwise falls back to bisection.
pub fn bracketed_root<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    lo: f64,
    hi: f64,
    tol_x: f64,
    tol_f: f64,
    max_iter: usize,
) -> Result<f64> {
    let mut a = lo;
    let mut b = hi;
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Bracket(format!(
            "no sign change on [{a}, {b}]: f = ({fa:.3e}, {fb:.3e})"
        )));
    }
    for _ in 0..max_iter {
        // Secant candidate from the current endpoints.
        let mut x = b - fb * (b - a) / (fb - fa);
        let margin = 0.01 * (b - a);
        if !(x > a + margin && x < b - margin) {
            x = 0.5 * (a + b);
        }
        let fx = f(x)?;
        if fx.abs() <= tol_f || (b - a) <= tol_x {
            return Ok(x);
        }
        if fx.signum() == fa.signum() {
            a = x;
            fa = fx;
        } else {
            b = x;
            fb = fx;
        }
        if (b - a) <= tol_x {
            return Ok(0.5 * (a + b));
        }
    }
    Ok(0.5 * (a + b))
}

/// Golden-section minimization of a unimodal `f` on `[lo, hi]`.
/// Returns `(argmin, min, achieved width)`. Boundary minima are legitimate:
/// the search simply converges to the corresponding endpoint.
pub fn golden_min<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    lo: f64,
    hi: f64,
    tol_x: f64,
    max_iter: usize,
) -> Result<(f64, f64, f64)> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut a = lo;
    let mut b = hi;
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut iter = 0;
    while (b - a) > tol_x && iter < max_iter {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d)?;
        }
        iter += 1;
    }
    let (x, fx) = if fc < fd { (c, fc) } else { (d, fd) };
    Ok((x, fx, b - a))
}
