//! Upper spectral edge of the free multiplicative convolution and the
//! inverse subordination functions on `(E_+, inf)`.
//!
//! Everything here rests on one parametric primitive. For a real parameter
//! `w` above the support of `mu_A`, the point `x` where the subordination
//! function `Omega_B` takes the value `w` solves the scalar equation
//!
//! ```text
//! M_B(x * M_A(w) / w) = M_A(w)
//! ```
//!
//! obtained by eliminating `Omega_A = x M_A(w)/w` from the subordination
//! system. Since `M_B` is strictly increasing from 1 to infinity on
//! `(max supp mu_B, inf)`, the inner unknown `u = Omega_A` is found by
//! bracketed root finding and `x(w) = u w / M_A(w)`.
//!
//! The curve `x(w)` traces `Omega_B^{-1}` on the physical branch
//! `w > Omega_B(E_+)` and its analytic continuation below; the upper edge is
//! its minimum: `E_+ = min_w x(w)` with `Omega_B(E_+) = argmin` (the
//! derivative of `Omega_B` blows up like `|x - E_+|^{-1/2}` at the edge, so
//! the inverse has a smooth quadratic minimum there).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::AtomicMeasure;
use crate::roots::{bracketed_root, golden_min};
use crate::subordination::{self, SolverOptions};

/// Relative offset of the parametric bracket above the top atom.
const BRACKET_REL_OFFSET: f64 = 1e-12;

/// Tolerance on the scalar defect in the inner root solve.
const SCALAR_DEFECT_TOL: f64 = 1e-13;

/// Upper-edge data for a measure pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeData {
    /// Rightmost point of the support of `mu_A (x) mu_B`.
    pub e_plus: f64,
    /// `Omega_A(E_+)`: the detection threshold for b-spikes.
    pub omega_a_edge: f64,
    /// `Omega_B(E_+)`: the detection threshold for a-spikes.
    pub omega_b_edge: f64,
    /// Square-root coefficient of `Omega_A` at the edge, fitted from the
    /// real side: `Omega_A(E_+ + t) - Omega_A(E_+) ~ C_A sqrt(t)`.
    pub sqrt_coeff_a: f64,
    /// Same for `Omega_B`.
    pub sqrt_coeff_b: f64,
    /// Parametric search bracket `(omega_lo, omega_hi)` used for the edge.
    pub bracket: (f64, f64),
    /// Achieved bracket width of the minimization.
    pub precision: f64,
    /// Distance from `Omega_B(E_+)` to the support of `mu_A` (positive by
    /// subordination-image separation).
    pub dist_omega_b_to_supp_a: f64,
    /// Distance from `Omega_A(E_+)` to the support of `mu_B`.
    pub dist_omega_a_to_supp_b: f64,
}

/// Solves `M_B(u) = M_A(w)` for `u` above the support of `mu_B` and returns
/// `(x, u) = (u w / M_A(w), Omega_A)`.
fn x_of_omega(mu_a: &AtomicMeasure, mu_b: &AtomicMeasure, w: f64) -> Result<(f64, f64)> {
    let zw = Complex64::new(w, 0.0);
    let ma = mu_a.m_transform(zw)?.re;
    if ma <= 1.0 {
        return Err(Error::Domain(format!(
            "parametric point w = {w} gives M_A = {ma} <= 1; w must lie above supp mu_A"
        )));
    }
    let b_max = mu_b.max_atom();
    // M_B increases from 1 (at supp) to infinity: bracket and expand.
    let u_lo = b_max * (1.0 + 1e-13);
    let mut u_hi = b_max.max(1.0) * 2.0 + 2.0 * ma;
    let f = |u: f64| -> Result<f64> { Ok(mu_b.m_transform(Complex64::new(u, 0.0))?.re - ma) };
    let mut expansions = 0;
    while f(u_hi)? < 0.0 {
        u_hi *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Bracket(format!(
                "could not bracket M_B(u) = {ma} above supp mu_B"
            )));
        }
    }
    let u = bracketed_root(f, u_lo, u_hi, 0.0, SCALAR_DEFECT_TOL * (1.0 + ma), 200)?;
    Ok((u * w / ma, u))
}

/// Locates the upper edge `E_+` of `mu_A (x) mu_B` together with the
/// subordination values and square-root coefficients at the edge.
///
/// The parametric minimization is cross-validated against Stieltjes
/// inversion: the density must be negligible just above the returned edge
/// and appreciable just below it.
pub fn locate_upper_edge(mu_a: &AtomicMeasure, mu_b: &AtomicMeasure) -> Result<EdgeData> {
    let a_max = mu_a.max_atom();
    let w_lo = a_max * (1.0 + BRACKET_REL_OFFSET);
    // The boundary value of x(w) as w drops to the top atom is
    // a_max * b_max; the minimum sits at an O(1) omega for mean-1 measures.
    let mut w_hi = a_max + 10.0 * (1.0 + a_max * mu_b.max_atom());

    let x_at = |w: f64| -> Result<f64> { Ok(x_of_omega(mu_a, mu_b, w)?.0) };

    // Expand to the right until the function is visibly increasing there,
    // so the golden search sees a unimodal window containing the minimum.
    let mut guard = 0;
    loop {
        let f_end = x_at(w_hi)?;
        let f_in = x_at(w_hi * 0.99)?;
        if f_end >= f_in || guard > 10 {
            break;
        }
        w_hi *= 2.0;
        guard += 1;
    }

    let tol_x = 1e-11 * (1.0 + a_max);
    let (w_star, e_plus, width) = golden_min(x_at, w_lo, w_hi, tol_x, 400)?;
    let (_, omega_a_edge) = x_of_omega(mu_a, mu_b, w_star)?;
    let omega_b_edge = w_star;

    // Cross-validation by Stieltjes inversion at the claimed edge. A
    // single-atom factor makes the convolution a rescaled copy of the other
    // measure (purely atomic, no square-root density), so the density-based
    // check only applies to genuine pairs.
    let opts = SolverOptions::default();
    if mu_a.len() > 1 && mu_b.len() > 1 {
        let eta = 1e-7;
        let above = Complex64::new(e_plus + 1e-3, eta);
        let below = Complex64::new(e_plus - 1e-2, eta);
        let im_above = stieltjes_im(mu_a, mu_b, above, &opts)?;
        let im_below = stieltjes_im(mu_a, mu_b, below, &opts)?;
        if im_above > 1e-3 {
            return Err(Error::EdgeInconsistency {
                parametric: e_plus,
                detail: format!("Im m(E_+ + 1e-3 + i 1e-7) = {im_above:.3e} > 1e-3"),
            });
        }
        if im_below < 1e-2 {
            return Err(Error::EdgeInconsistency {
                parametric: e_plus,
                detail: format!("Im m(E_+ - 1e-2 + i 1e-7) = {im_below:.3e} < 1e-2"),
            });
        }
    }

    // Square-root coefficients from the real side: forward-solve Omega at
    // E_+ + t for a small ladder of t and fit C = (Omega(E_+ + t) - edge)/sqrt(t).
    let mut ca = 0.0;
    let mut cb = 0.0;
    let mut count = 0.0;
    for &t in &[1e-4, 4e-4, 1.6e-3] {
        let z = Complex64::new(e_plus + t, 0.0);
        if let Ok(sub) = subordination::solve(mu_a, mu_b, z, &opts) {
            ca += (sub.omega_a.re - omega_a_edge) / t.sqrt();
            cb += (sub.omega_b.re - omega_b_edge) / t.sqrt();
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Err(Error::Numeric(
            "could not fit square-root coefficients at the edge".into(),
        ));
    }
    let (sqrt_coeff_a, sqrt_coeff_b) = (ca / count, cb / count);

    let dist_b_to_a = dist_to_atoms(omega_b_edge, mu_a);
    let dist_a_to_b = dist_to_atoms(omega_a_edge, mu_b);

    Ok(EdgeData {
        e_plus,
        omega_a_edge,
        omega_b_edge,
        sqrt_coeff_a,
        sqrt_coeff_b,
        bracket: (w_lo, w_hi),
        precision: width,
        dist_omega_b_to_supp_a: dist_b_to_a,
        dist_omega_a_to_supp_b: dist_a_to_b,
    })
}

fn stieltjes_im(
    mu_a: &AtomicMeasure,
    mu_b: &AtomicMeasure,
    z: Complex64,
    opts: &SolverOptions,
) -> Result<f64> {
    let sub = subordination::solve(mu_a, mu_b, z, opts)?;
    let (_, m) = subordination::m_and_stieltjes(mu_a, &sub)?;
    Ok(m.im)
}

fn dist_to_atoms(x: f64, m: &AtomicMeasure) -> f64 {
    m.atoms()
        .iter()
        .map(|&a| (x - a).abs())
        .fold(f64::INFINITY, f64::min)
}

/// `Omega_B^{-1}(a_hat)`: the predicted outlier location for an a-spike.
/// Below the threshold `Omega_B(E_+)` the convention value `E_+` is
/// returned.
pub fn inverse_omega_b(
    edge: &EdgeData,
    mu_a: &AtomicMeasure,
    mu_b: &AtomicMeasure,
    a_hat: f64,
) -> Result<f64> {
    if !(a_hat > 0.0) {
        return Err(Error::Domain(format!("a_hat = {a_hat} must be positive")));
    }
    if a_hat <= edge.omega_b_edge {
        return Ok(edge.e_plus);
    }
    Ok(x_of_omega(mu_a, mu_b, a_hat)?.0)
}

/// `(Omega_B^{-1})'(a_hat)` for a supercritical a-spike, via the implicit
/// derivative of the subordination system at the predicted location.
pub fn inverse_omega_b_derivative(
    edge: &EdgeData,
    mu_a: &AtomicMeasure,
    mu_b: &AtomicMeasure,
    a_hat: f64,
) -> Result<f64> {
    if a_hat <= edge.omega_b_edge {
        return Err(Error::Domain(format!(
            "(Omega_B^-1)' undefined at a_hat = {a_hat} <= threshold {}",
            edge.omega_b_edge
        )));
    }
    let x_star = inverse_omega_b(edge, mu_a, mu_b, a_hat)?;
    let sub = subordination::solve(
        mu_a,
        mu_b,
        Complex64::new(x_star, 0.0),
        &SolverOptions::default(),
    )?;
    let (_, ob_prime) = subordination::omega_derivative(mu_a, mu_b, &sub)?;
    let d = ob_prime.re;
    if !(d > 0.0) {
        return Err(Error::Singular(format!(
            "Omega_B'({x_star}) = {d} is not positive; too close to the edge"
        )));
    }
    Ok(1.0 / d)
}

/// `Omega_A^{-1}(b_hat)`: mirror of [`inverse_omega_b`] with the roles of
/// the measures swapped.
pub fn inverse_omega_a(
    edge: &EdgeData,
    mu_a: &AtomicMeasure,
    mu_b: &AtomicMeasure,
    b_hat: f64,
) -> Result<f64> {
    if !(b_hat > 0.0) {
        return Err(Error::Domain(format!("b_hat = {b_hat} must be positive")));
    }
    if b_hat <= edge.omega_a_edge {
        return Ok(edge.e_plus);
    }
    Ok(x_of_omega(mu_b, mu_a, b_hat)?.0)
}

/// `(Omega_A^{-1})'(b_hat)` for a supercritical b-spike.
pub fn inverse_omega_a_derivative(
    edge: &EdgeData,
    mu_a: &AtomicMeasure,
    mu_b: &AtomicMeasure,
    b_hat: f64,
) -> Result<f64> {
    if b_hat <= edge.omega_a_edge {
        return Err(Error::Domain(format!(
            "(Omega_A^-1)' undefined at b_hat = {b_hat} <= threshold {}",
            edge.omega_a_edge
        )));
    }
    let x_star = inverse_omega_a(edge, mu_a, mu_b, b_hat)?;
    let sub = subordination::solve(
        mu_a,
        mu_b,
        Complex64::new(x_star, 0.0),
        &SolverOptions::default(),
    )?;
    let (oa_prime, _) = subordination::omega_derivative(mu_a, mu_b, &sub)?;
    let d = oa_prime.re;
    if !(d > 0.0) {
        return Err(Error::Singular(format!(
            "Omega_A'({x_star}) = {d} is not positive; too close to the edge"
        )));
    }
    Ok(1.0 / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{discretize, DensitySpec};

    fn uniform_pair(n: usize) -> (AtomicMeasure, AtomicMeasure) {
        let spec = DensitySpec::uniform(0.5, 1.5).unwrap();
        (discretize(&spec, n).unwrap(), discretize(&spec, n).unwrap())
    }

    #[test]
    fn point_mass_pair_edge_is_one() {
        let d = AtomicMeasure::point_mass(1.0);
        let edge = locate_upper_edge(&d, &d).unwrap();
        assert!((edge.e_plus - 1.0).abs() <= 1e-9, "E_+ = {}", edge.e_plus);
        assert!((edge.omega_a_edge - 1.0).abs() <= 1e-9);
        assert!((edge.omega_b_edge - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn identity_element_edge_is_max_atom() {
        let (mu_a, _) = uniform_pair(200);
        let delta = AtomicMeasure::point_mass(1.0);
        let edge = locate_upper_edge(&mu_a, &delta).unwrap();
        assert!(
            (edge.e_plus - mu_a.max_atom()).abs() <= 1e-9,
            "E_+ = {} vs a_max = {}",
            edge.e_plus,
            mu_a.max_atom()
        );
        // Threshold for a-spikes is a_max itself in the identity reduction.
        assert!((edge.omega_b_edge - mu_a.max_atom()).abs() <= 1e-9);
    }

    #[test]
    fn uniform_pair_edge_data_sane() {
        let (mu_a, mu_b) = uniform_pair(1000);
        let edge = locate_upper_edge(&mu_a, &mu_b).unwrap();
        assert!(edge.e_plus > mu_a.max_atom(), "edge {} above atoms", edge.e_plus);
        assert!(edge.dist_omega_b_to_supp_a > 0.0);
        assert!(edge.dist_omega_a_to_supp_b > 0.0);
        assert!(edge.omega_b_edge > mu_a.max_atom());
        assert!(edge.omega_a_edge > mu_b.max_atom());
        assert!(edge.sqrt_coeff_a > 0.0 && edge.sqrt_coeff_b > 0.0);
        // Symmetric pair: the two sides agree.
        assert!((edge.omega_a_edge - edge.omega_b_edge).abs() <= 1e-6);
    }

    #[test]
    fn inverse_identity_reduction() {
        let (mu_a, _) = uniform_pair(100);
        let delta = AtomicMeasure::point_mass(1.0);
        let edge = locate_upper_edge(&mu_a, &delta).unwrap();
        for a_hat in [edge.omega_b_edge + 0.3, edge.omega_b_edge + 1.0] {
            let x = inverse_omega_b(&edge, &mu_a, &delta, a_hat).unwrap();
            assert!((x - a_hat).abs() <= 1e-9 * (1.0 + a_hat), "x = {x} vs {a_hat}");
            let d = inverse_omega_b_derivative(&edge, &mu_a, &delta, a_hat).unwrap();
            assert!((d - 1.0).abs() <= 1e-7, "derivative {d}");
        }
    }

    #[test]
    fn below_threshold_convention() {
        let (mu_a, mu_b) = uniform_pair(100);
        let edge = locate_upper_edge(&mu_a, &mu_b).unwrap();
        let x = inverse_omega_b(&edge, &mu_a, &mu_b, edge.omega_b_edge - 0.1).unwrap();
        assert_eq!(x, edge.e_plus);
        let y = inverse_omega_a(&edge, &mu_a, &mu_b, edge.omega_a_edge - 0.1).unwrap();
        assert_eq!(y, edge.e_plus);
        assert!(inverse_omega_b_derivative(&edge, &mu_a, &mu_b, edge.omega_b_edge - 0.1).is_err());
    }

    #[test]
    fn inverse_round_trip_through_solver() {
        // Oracle: forward subordination solve at the returned location.
        let (mu_a, mu_b) = uniform_pair(300);
        let edge = locate_upper_edge(&mu_a, &mu_b).unwrap();
        let a_hat = edge.omega_b_edge + 0.5;
        let x = inverse_omega_b(&edge, &mu_a, &mu_b, a_hat).unwrap();
        let sub = subordination::solve(
            &mu_a,
            &mu_b,
            Complex64::new(x, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(
            (sub.omega_b.re - a_hat).abs() <= 1e-9 * (1.0 + a_hat),
            "round trip {} vs {}",
            sub.omega_b.re,
            a_hat
        );
        // Mirror side.
        let b_hat = edge.omega_a_edge + 0.5;
        let y = inverse_omega_a(&edge, &mu_a, &mu_b, b_hat).unwrap();
        let sub = subordination::solve(
            &mu_a,
            &mu_b,
            Complex64::new(y, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!((sub.omega_a.re - b_hat).abs() <= 1e-9 * (1.0 + b_hat));
    }

    #[test]
    fn inverse_monotone_on_ladder() {
        let (mu_a, mu_b) = uniform_pair(200);
        let edge = locate_upper_edge(&mu_a, &mu_b).unwrap();
        let mut prev = edge.e_plus;
        for k in 1..=50 {
            let a_hat = edge.omega_b_edge + 0.02 * k as f64;
            let x = inverse_omega_b(&edge, &mu_a, &mu_b, a_hat).unwrap();
            assert!(x > prev, "not increasing at k={k}: {x} <= {prev}");
            prev = x;
        }
    }

    #[test]
    fn inverse_derivative_matches_stencil() {
        // Oracle: 5-point stencil on inverse_omega_b.
        let (mu_a, mu_b) = uniform_pair(200);
        let edge = locate_upper_edge(&mu_a, &mu_b).unwrap();
        let a_hat = edge.omega_b_edge + 0.4;
        let h = 1e-4;
        let f = |v: f64| inverse_omega_b(&edge, &mu_a, &mu_b, v).unwrap();
        let stencil =
            (-f(a_hat + 2.0 * h) + 8.0 * f(a_hat + h) - 8.0 * f(a_hat - h) + f(a_hat - 2.0 * h))
                / (12.0 * h);
        let d = inverse_omega_b_derivative(&edge, &mu_a, &mu_b, a_hat).unwrap();
        assert!(
            ((stencil - d) / d).abs() <= 1e-5,
            "stencil {stencil} vs implicit {d}"
        );
    }

    #[test]
    fn inverse_derivative_vanishes_toward_threshold() {
        // (Omega_B^-1)' ~ margin near the threshold: direction check on a
        // decreasing margin ladder.
        let (mu_a, mu_b) = uniform_pair(200);
        let edge = locate_upper_edge(&mu_a, &mu_b).unwrap();
        let d: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|m| {
                inverse_omega_b_derivative(&edge, &mu_a, &mu_b, edge.omega_b_edge + m).unwrap()
            })
            .collect();
        assert!(d[0] > d[1] && d[1] > d[2], "not decreasing: {d:?}");
        // Rough linearity in the margin: halving the margin roughly halves
        // the derivative.
        let ratio = d[1] / d[0];
        assert!(ratio > 0.3 && ratio < 0.8, "ratio {ratio}");
    }

    #[test]
    fn near_threshold_quadratic_law() {
        let (mu_a, mu_b) = uniform_pair(300);
        let edge = locate_upper_edge(&mu_a, &mu_b).unwrap();
        // Fit c at a midpoint margin, then check the whole window.
        let margins: Vec<f64> = vec![0.02, 0.04, 0.08, 0.12, 0.2];
        let mid = 0.063;
        let x_mid = inverse_omega_b(&edge, &mu_a, &mu_b, edge.omega_b_edge + mid).unwrap();
        let c = (x_mid - edge.e_plus) / (mid * mid);
        for &m in &margins {
            let x = inverse_omega_b(&edge, &mu_a, &mu_b, edge.omega_b_edge + m).unwrap();
            let predicted = c * m * m;
            let actual = x - edge.e_plus;
            let ratio = actual / predicted;
            assert!(
                (0.25..=4.0).contains(&ratio),
                "quadratic law broken at margin {m}: ratio {ratio}"
            );
        }
    }

    #[test]
    fn sqrt_coeff_routes_agree() {
        // Route 1: the real-side fit stored in EdgeData. Route 2: the
        // support-side fit Im Omega(E_+ - t + i eta) / sqrt(t).
        let (mu_a, mu_b) = uniform_pair(500);
        let edge = locate_upper_edge(&mu_a, &mu_b).unwrap();
        let opts = SolverOptions::default();
        let mut cb = 0.0;
        let mut n = 0.0;
        for &t in &[2e-3, 4e-3, 8e-3] {
            let z = Complex64::new(edge.e_plus - t, 1e-7);
            let sub = subordination::solve(&mu_a, &mu_b, z, &opts).unwrap();
            cb += sub.omega_b.im / t.sqrt();
            n += 1.0;
        }
        cb /= n;
        let ratio = cb / edge.sqrt_coeff_b;
        assert!(
            (0.5..=2.0).contains(&ratio),
            "sqrt coefficient routes disagree: {cb} vs {} (ratio {ratio})",
            edge.sqrt_coeff_b
        );
    }

    #[test]
    fn omega_b_prime_sqrt_scaling() {
        // |Omega_B'(E_+ + t)| ~ t^{-1/2}: the ratio at t = 0.025 vs 0.1
        // should be about 2.
        let (mu_a, mu_b) = uniform_pair(300);
        let edge = locate_upper_edge(&mu_a, &mu_b).unwrap();
        let opts = SolverOptions::default();
        let d_at = |t: f64| {
            let sub =
                subordination::solve(&mu_a, &mu_b, Complex64::new(edge.e_plus + t, 0.0), &opts)
                    .unwrap();
            let (_, db) = subordination::omega_derivative(&mu_a, &mu_b, &sub).unwrap();
            db.re
        };
        let ratio = d_at(0.025) / d_at(0.1);
        assert!(
            (ratio - 2.0).abs() <= 0.6,
            "sqrt scaling ratio {ratio} not within 30% of 2"
        );
    }
}
