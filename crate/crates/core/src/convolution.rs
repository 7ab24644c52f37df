//! Frozen solver state for a measure pair.
//!
//! A [`ConvolutionHandle`] owns the pair `(mu_A, mu_B)` and lazily computes
//! and caches the quantities every consumer needs: edge data, a density
//! grid over the support, and quantile locations. All caches are
//! write-once, so a handle can be shared across threads freely.

use num_complex::Complex64;
use std::sync::OnceLock;

use crate::edge::{self, EdgeData};
use crate::error::{Error, Result};
use crate::measure::{quantile_locations, AtomicMeasure, GridDensity, Quantiles};
use crate::subordination::{self, SolverOptions, SubordinationValue};

/// Default Stieltjes-inversion height for cached densities.
pub const DEFAULT_ETA_DEN: f64 = 1e-6;

/// Default number of grid points for cached densities.
pub const DEFAULT_DENSITY_POINTS: usize = 2000;

pub struct ConvolutionHandle {
    mu_a: AtomicMeasure,
    mu_b: AtomicMeasure,
    opts: SolverOptions,
    edge: OnceLock<EdgeData>,
    density: OnceLock<GridDensity>,
}

impl ConvolutionHandle {
    pub fn new(mu_a: AtomicMeasure, mu_b: AtomicMeasure, opts: SolverOptions) -> Self {
        Self {
            mu_a,
            mu_b,
            opts,
            edge: OnceLock::new(),
            density: OnceLock::new(),
        }
    }

    pub fn mu_a(&self) -> &AtomicMeasure {
        &self.mu_a
    }

    pub fn mu_b(&self) -> &AtomicMeasure {
        &self.mu_b
    }

    pub fn opts(&self) -> &SolverOptions {
        &self.opts
    }

    /// Solves the subordination system at `z`.
    pub fn solve(&self, z: Complex64) -> Result<SubordinationValue> {
        subordination::solve(&self.mu_a, &self.mu_b, z, &self.opts)
    }

    /// M-transform and Stieltjes transform of the convolution at `z`.
    pub fn m_of_convolution(&self, z: Complex64) -> Result<(Complex64, Complex64)> {
        let sub = self.solve(z)?;
        subordination::m_and_stieltjes(&self.mu_a, &sub)
    }

    /// Edge data, computed once.
    pub fn edge(&self) -> Result<&EdgeData> {
        if let Some(e) = self.edge.get() {
            return Ok(e);
        }
        let e = edge::locate_upper_edge(&self.mu_a, &self.mu_b)?;
        Ok(self.edge.get_or_init(|| e))
    }

    /// Density on the default grid spanning the support with a small pad,
    /// computed once at [`DEFAULT_ETA_DEN`].
    pub fn density(&self) -> Result<&GridDensity> {
        if let Some(d) = self.density.get() {
            return Ok(d);
        }
        let e = self.edge()?;
        let lo = (self.mu_a.min_atom() * self.mu_b.min_atom() * 0.5).max(1e-6);
        let hi = e.e_plus * 1.02;
        let grid: Vec<f64> = (0..DEFAULT_DENSITY_POINTS)
            .map(|i| lo + (hi - lo) * i as f64 / (DEFAULT_DENSITY_POINTS - 1) as f64)
            .collect();
        let d = subordination::density_on_grid(&self.mu_a, &self.mu_b, &grid, DEFAULT_ETA_DEN, &self.opts)?;
        Ok(self.density.get_or_init(|| d))
    }

    /// `N`-quantiles of the cached density.
    pub fn quantiles(&self, n: usize) -> Result<Quantiles> {
        quantile_locations(self.density()?, n)
    }

    /// Forward evaluation of `Omega_A`, `Omega_B` at a real point strictly
    /// above the edge.
    pub fn omega_at_real(&self, x: f64) -> Result<(f64, f64)> {
        let e = self.edge()?;
        if x <= e.e_plus {
            return Err(Error::Domain(format!(
                "forward Omega evaluation needs x > E_+ = {}, got {x}",
                e.e_plus
            )));
        }
        let sub = self.solve(Complex64::new(x, 0.0))?;
        Ok((sub.omega_a.re, sub.omega_b.re))
    }
}
