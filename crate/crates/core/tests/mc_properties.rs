//! Monte Carlo property checks at moderate size: spectral rigidity against
//! the convolution quantiles, eigenvector delocalization, and the edge
//! estimator's epsilon sensitivity.

use freespike_core::convolution::ConvolutionHandle;
use freespike_core::harness::{plan_context, ExperimentPlan};
use freespike_core::rmt::{self, Field, StreamKey};
use freespike_core::subordination::SolverOptions;
use rayon::prelude::*;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

#[test]
fn rigidity_normalized_statistic() {
    freespike_core::configure_threads(None);
    let plan = ExperimentPlan::default();
    let n = 500;
    let trials = 8;
    let ctx = plan_context(&plan, n).unwrap();
    let handle = ConvolutionHandle::new(ctx.mu_a.clone(), ctx.mu_b.clone(), SolverOptions::default());
    let gammas = handle.quantiles(n).unwrap().locations;

    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let key = StreamKey::new(plan.master_seed, n, trial, "haar");
            let u = rmt::sample_haar(n, Field::RealOrthogonal, &key).unwrap();
            let mats = rmt::build_model(&ctx.model, &u).unwrap();
            let eigs = rmt::eigenvalues_only(&mats.q1).unwrap();
            rmt::rigidity_report(&eigs, &gammas)
                .into_iter()
                .map(|r| r.normalized)
                .collect()
        })
        .collect();

    // Median over trials of the max normalized deviation over the top 50
    // ranks stays within the N^0.15 slack window.
    let maxima: Vec<f64> = per_trial
        .iter()
        .map(|rows| rows[..50].iter().fold(0.0f64, |a, &b| a.max(b)))
        .collect();
    let med = median(maxima);
    let bound = (n as f64).powf(0.15);
    assert!(med <= bound, "median max normalized rigidity {med:.3} > {bound:.3}");

    // No systematic growth in the rank: regress the per-rank median of the
    // log-statistic against log rank; the slope stays within +-0.3.
    let ranks = 50;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..ranks {
        let vals: Vec<f64> = per_trial.iter().map(|rows| rows[i].max(1e-12)).collect();
        xs.push(((i + 1) as f64).ln());
        ys.push(median(vals).ln());
    }
    let nf = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let slope = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
    assert!(
        slope.abs() <= 0.3,
        "normalized rigidity statistic drifts with rank: slope {slope:.3}"
    );
}

#[test]
fn delocalization_statistic_is_size_free() {
    freespike_core::configure_threads(None);
    let plan = ExperimentPlan::default();
    let trials = 6;
    // The statistic N max_i |u_k(i)|^2 near the edge carries the model
    // constant ~ 1/dist(Omega_B(E_+), supp mu_A)^2 (edge vectors weight the
    // coordinates whose diagonal entry sits closest to Omega_B(E_+)), so
    // the meaningful check is that it stays bounded in N at that scale.
    let mut medians = Vec::new();
    let mut dist = f64::NAN;
    for &n in &[250usize, 500] {
        let ctx = plan_context(&plan, n).unwrap();
        dist = ctx.edge.dist_omega_b_to_supp_a;
        let stats: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let key = StreamKey::new(plan.master_seed, n, trial, "haar");
                let u = rmt::sample_haar(n, Field::RealOrthogonal, &key).unwrap();
                let mats = rmt::build_model(&ctx.model, &u).unwrap();
                let spec = rmt::spectral_decomposition(&mats.q1).unwrap();
                let rep = rmt::delocalization_report(&spec);
                assert!(!rep.degenerate);
                rep.stats[..50].iter().fold(0.0f64, |a, &b| a.max(b))
            })
            .collect();
        medians.push(median(stats));
    }
    let cap = 4.0 / (dist * dist);
    assert!(
        medians.iter().all(|&m| m <= cap),
        "delocalization statistic {medians:?} above the model scale {cap:.1}"
    );
    let ratio = medians[1] / medians[0];
    assert!(
        (0.4..=2.5).contains(&ratio),
        "statistic should be N-free: medians {medians:?}, ratio {ratio:.2}"
    );
}

#[test]
fn estimator_epsilon_sensitivity() {
    freespike_core::configure_threads(None);
    let plan = ExperimentPlan::default();
    let n = 400;
    let ctx = plan_context(&plan, n).unwrap();
    let diffs: Vec<f64> = (0..6usize)
        .into_par_iter()
        .map(|trial| {
            let key = StreamKey::new(plan.master_seed, n, trial, "haar");
            let u = rmt::sample_haar(n, Field::RealOrthogonal, &key).unwrap();
            let svd = rmt::svd_of_y(ctx.model.base_a(), ctx.model.base_b(), &u).unwrap();
            let e1 = rmt::estimate_omega_beta_edge_from_svd(&svd, ctx.model.base_a(), 0.05)
                .unwrap()
                .value
                .re;
            let e2 = rmt::estimate_omega_beta_edge_from_svd(&svd, ctx.model.base_a(), 0.1)
                .unwrap()
                .value
                .re;
            (e1 - e2).abs()
        })
        .collect();
    let med = median(diffs);
    let bound = 3.0 * (n as f64).powf(-1.0 / 3.0);
    assert!(med <= bound, "epsilon sensitivity {med:.4} > {bound:.4}");
}
