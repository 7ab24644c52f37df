//! Free multiplicative convolution of spectral measures, closed-form
//! predictions for spiked Haar-multiplicative random matrix models, and the
//! Monte Carlo machinery to verify those predictions against simulated
//! ensembles.
//!
//! The layers, bottom to top:
//!
//! * [`measure`] — atomic measures on `(0, inf)`, density specs, analytic
//!   transforms, discretization and the Levy distance.
//! * [`subordination`] — the fixed-point solver for the subordination
//!   system defining `mu_A (x) mu_B`, plus densities and derivatives.
//! * [`convolution`] — a frozen handle bundling a measure pair with cached
//!   edge data, density grid and quantiles.
//! * [`edge`] — upper spectral edge, detection thresholds and the inverse
//!   subordination functions with derivatives.
//! * [`spike`] — spiked-model configuration, spike classification and all
//!   closed-form predictions (outlier locations, overlaps, sticking,
//!   delocalization bounds, master-equation factors).
//! * [`rmt`] — Haar sampling, model construction, exact spectral
//!   decompositions and resolvent/local-law diagnostics.
//! * [`harness`] — experiment plans, Monte Carlo suites, rate fits and
//!   CSV/JSON persistence.

pub mod convolution;
pub mod edge;
pub mod error;
pub mod harness;
mod lapack;
pub mod measure;
pub mod rmt;
mod roots;
pub mod spike;
pub mod subordination;

pub use error::{Error, Result};

/// Configures the number of worker threads used for trial-level parallelism
/// and pins the BLAS backend to one thread per worker when more than one
/// worker is requested (nested BLAS threading would oversubscribe).
///
/// Returns the effective worker count. Safe to call once, before heavy work.
pub fn configure_threads(workers: Option<usize>) -> usize {
    let workers = workers.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    let workers = workers.max(1);
    lapack::set_blas_threads(if workers > 1 { 1 } else { 2.min(num_threads_cap()) });
    // Ignore the error if a global pool already exists (tests call this twice).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    workers
}

fn num_threads_cap() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
