//! Spiked-model configuration, spike classification and the closed-form
//! predictions: outlier locations with rates, eigenvector overlaps,
//! eigenvalue sticking, non-outlier delocalization bounds, and the
//! master-equation factors.
//!
//! Conventions: everything is 0-indexed. Spike `i` of side A perturbs the
//! `i`-th largest base entry, `a_hat_i = a_i (1 + d_a[i])`. A spike is an
//! *outlier* when its value exceeds the detection threshold (`Omega_B(E_+)`
//! for a-spikes, `Omega_A(E_+)` for b-spikes), and *supercritical* when the
//! margin is at least `threshold_multiplier * N^{-1/3}`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::edge::{
    inverse_omega_a, inverse_omega_a_derivative, inverse_omega_b, inverse_omega_b_derivative,
    EdgeData,
};
use crate::error::{Error, Result};
use crate::measure::{discretize, AtomicMeasure, DensitySpec};
use crate::subordination::{self, SolverOptions};

/// Hard cap on the total spike count.
pub const MAX_SPIKES: usize = 32;

/// Spiked diagonal model: base spectra plus multiplicative spikes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpikeModel {
    /// Unspiked diagonal of A, descending.
    base_a: Vec<f64>,
    /// Unspiked diagonal of B, descending.
    base_b: Vec<f64>,
    /// Spike strengths for the top entries of A (all >= 0).
    d_a: Vec<f64>,
    /// Spike strengths for the top entries of B.
    d_b: Vec<f64>,
    /// Spiked diagonal of A, re-sorted descending.
    spiked_a: Vec<f64>,
    /// Spiked diagonal of B, re-sorted descending.
    spiked_b: Vec<f64>,
}

/// JSON wire form: either one `base` spec for both sides or separate
/// `base_a` / `base_b`.
#[derive(Deserialize)]
struct SpikeModelWire {
    #[serde(default)]
    base: Option<DensitySpec>,
    #[serde(default)]
    base_a: Option<DensitySpec>,
    #[serde(default)]
    base_b: Option<DensitySpec>,
    #[serde(rename = "N")]
    n: usize,
    #[serde(default)]
    d_a: Vec<f64>,
    #[serde(default)]
    d_b: Vec<f64>,
}

impl SpikeModel {
    /// Builds a model from explicit descending base diagonals.
    pub fn new(base_a: Vec<f64>, base_b: Vec<f64>, d_a: Vec<f64>, d_b: Vec<f64>) -> Result<Self> {
        if base_a.len() != base_b.len() || base_a.is_empty() {
            return Err(Error::Config(
                "base diagonals must be non-empty and of equal length".into(),
            ));
        }
        for v in base_a.iter().chain(&base_b) {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::Config(format!("base entry {v} must be positive")));
            }
        }
        if base_a.windows(2).any(|w| w[1] > w[0]) || base_b.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("base diagonals must be descending".into()));
        }
        if d_a.len() + d_b.len() > MAX_SPIKES {
            return Err(Error::Config(format!(
                "too many spikes: {} + {} > {MAX_SPIKES}",
                d_a.len(),
                d_b.len()
            )));
        }
        if d_a.len() > base_a.len() || d_b.len() > base_b.len() {
            return Err(Error::Config("more spikes than diagonal entries".into()));
        }
        if d_a.iter().chain(&d_b).any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Config("spike strengths must be finite and >= 0".into()));
        }
        let spike = |base: &[f64], d: &[f64]| {
            let mut v = base.to_vec();
            for (k, dk) in d.iter().enumerate() {
                v[k] = base[k] * (1.0 + dk);
            }
            v.sort_by(|p, q| q.total_cmp(p));
            v
        };
        let spiked_a = spike(&base_a, &d_a);
        let spiked_b = spike(&base_b, &d_b);
        Ok(Self {
            base_a,
            base_b,
            d_a,
            d_b,
            spiked_a,
            spiked_b,
        })
    }

    /// Builds the base diagonals by discretizing density specs at size `n`.
    pub fn from_specs(
        spec_a: &DensitySpec,
        spec_b: &DensitySpec,
        n: usize,
        d_a: Vec<f64>,
        d_b: Vec<f64>,
    ) -> Result<Self> {
        let mut base_a = discretize(spec_a, n)?.atoms().to_vec();
        let mut base_b = discretize(spec_b, n)?.atoms().to_vec();
        base_a.reverse();
        base_b.reverse();
        // Equal-weight quantile discretizations have distinct atoms for the
        // supported spec kinds, so the diagonals have full length n.
        Self::new(base_a, base_b, d_a, d_b)
    }

    /// Parses the JSON wire form
    /// `{"base":{"kind":"uniform",...},"N":1000,"d_a":[2.0],"d_b":[]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let wire: SpikeModelWire = serde_json::from_str(text)?;
        let (spec_a, spec_b) = match (&wire.base, &wire.base_a, &wire.base_b) {
            (Some(b), None, None) => (b.clone(), b.clone()),
            (None, Some(a), Some(b)) => (a.clone(), b.clone()),
            _ => {
                return Err(Error::Config(
                    "spike model JSON needs either `base` or both `base_a` and `base_b`".into(),
                ))
            }
        };
        Self::from_specs(&spec_a, &spec_b, wire.n, wire.d_a, wire.d_b)
    }

    pub fn n(&self) -> usize {
        self.base_a.len()
    }

    /// Number of a-spikes.
    pub fn r(&self) -> usize {
        self.d_a.len()
    }

    /// Number of b-spikes.
    pub fn s(&self) -> usize {
        self.d_b.len()
    }

    pub fn base_a(&self) -> &[f64] {
        &self.base_a
    }

    pub fn base_b(&self) -> &[f64] {
        &self.base_b
    }

    pub fn d_a(&self) -> &[f64] {
        &self.d_a
    }

    pub fn d_b(&self) -> &[f64] {
        &self.d_b
    }

    /// Spiked diagonal of A, descending.
    pub fn spiked_a(&self) -> &[f64] {
        &self.spiked_a
    }

    /// Spiked diagonal of B, descending.
    pub fn spiked_b(&self) -> &[f64] {
        &self.spiked_b
    }

    /// Spiked value of a-spike `i` before re-sorting: `a_i (1 + d_a[i])`.
    pub fn a_hat(&self, i: usize) -> f64 {
        self.base_a[i] * (1.0 + self.d_a.get(i).copied().unwrap_or(0.0))
    }

    /// Spiked value of b-spike `j` before re-sorting.
    pub fn b_hat(&self, j: usize) -> f64 {
        self.base_b[j] * (1.0 + self.d_b.get(j).copied().unwrap_or(0.0))
    }

    /// ESD of the unspiked A diagonal.
    pub fn mu_a(&self) -> Result<AtomicMeasure> {
        AtomicMeasure::from_diagonal(&self.base_a, "mu_A")
    }

    /// ESD of the unspiked B diagonal.
    pub fn mu_b(&self) -> Result<AtomicMeasure> {
        AtomicMeasure::from_diagonal(&self.base_b, "mu_B")
    }
}

/// Which side a spike perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpikeSide {
    A,
    B,
}

/// Classification of one spike relative to the BBP threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpikeStatus {
    /// Margin at least the `N^{-1/3}` cutoff: a detectable outlier.
    Supercritical,
    /// Above the threshold but within the `N^{-1/3}` window: an outlier
    /// that sticks to the edge at scale `N^{-2/3}`.
    NearCritical,
    /// At or below the threshold: no outlier.
    Subcritical,
}

/// Eigenvalue labels and outlier index sets for a spiked model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelMap {
    /// `pi_a[i]` for spiked `i < r`: the eigenvalue index of a-spike `i`.
    pub pi_a: Vec<usize>,
    /// `pi_b[j]` for spiked `j < s`.
    pub pi_b: Vec<usize>,
    /// Labels of all spikes above their threshold.
    pub outliers: BTreeSet<usize>,
    /// Labels of supercritical spikes (margin >= the `N^{-1/3}` cutoff).
    pub outliers_plus: BTreeSet<usize>,
    /// Count of supercritical a-spikes.
    pub r_plus: usize,
    /// Count of supercritical b-spikes.
    pub s_plus: usize,
    n: usize,
    s: usize,
    r: usize,
}

impl LabelMap {
    /// Total label map: spiked indices use the stored ranks, the rest shift
    /// by the opposite side's spike count.
    pub fn pi_a(&self, i: usize) -> usize {
        if i < self.pi_a.len() {
            self.pi_a[i]
        } else {
            (i + self.s).min(self.n - 1)
        }
    }

    pub fn pi_b(&self, j: usize) -> usize {
        if j < self.pi_b.len() {
            self.pi_b[j]
        } else {
            (j + self.r).min(self.n - 1)
        }
    }
}

/// Multiplier on the `N^{-1/3}` supercriticality cutoff (the scale is
/// pinned by the transition; the constant is a convention).
pub const DEFAULT_THRESHOLD_MULTIPLIER: f64 = 1.0;

/// Classifies the spikes of a model against the thresholds carried by the
/// edge of its unspiked pair, and assigns eigenvalue labels by the
/// descending rank of the predicted locations (ties: a-spikes first, then
/// by index).
pub fn classify(model: &SpikeModel, edge: &EdgeData) -> Result<LabelMap> {
    classify_with_multiplier(model, edge, DEFAULT_THRESHOLD_MULTIPLIER)
}

pub fn classify_with_multiplier(
    model: &SpikeModel,
    edge: &EdgeData,
    multiplier: f64,
) -> Result<LabelMap> {
    let n = model.n();
    let cutoff = multiplier * (n as f64).powf(-1.0 / 3.0);
    let mu_a = model.mu_a()?;
    let mu_b = model.mu_b()?;
    let (r, s) = (model.r(), model.s());

    // Predicted locations for every spike (threshold convention: E_+).
    #[derive(Clone, Copy)]
    struct Entry {
        side: SpikeSide,
        index: usize,
        location: f64,
    }
    let mut entries = Vec::with_capacity(r + s);
    for i in 0..r {
        entries.push(Entry {
            side: SpikeSide::A,
            index: i,
            location: inverse_omega_b(edge, &mu_a, &mu_b, model.a_hat(i))?,
        });
    }
    for j in 0..s {
        entries.push(Entry {
            side: SpikeSide::B,
            index: j,
            location: inverse_omega_a(edge, &mu_a, &mu_b, model.b_hat(j))?,
        });
    }
    // Descending by location; ties broken a-side first, then by index.
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&p, &q| {
        entries[q]
            .location
            .total_cmp(&entries[p].location)
            .then_with(|| {
                let rank = |e: &Entry| match e.side {
                    SpikeSide::A => (0, e.index),
                    SpikeSide::B => (1, e.index),
                };
                rank(&entries[p]).cmp(&rank(&entries[q]))
            })
    });
    let mut pi_a = vec![0usize; r];
    let mut pi_b = vec![0usize; s];
    for (label, &k) in order.iter().enumerate() {
        match entries[k].side {
            SpikeSide::A => pi_a[entries[k].index] = label,
            SpikeSide::B => pi_b[entries[k].index] = label,
        }
    }

    let mut outliers = BTreeSet::new();
    let mut outliers_plus = BTreeSet::new();
    let mut r_plus = 0;
    let mut s_plus = 0;
    for i in 0..r {
        let margin = model.a_hat(i) - edge.omega_b_edge;
        if margin > 0.0 {
            outliers.insert(pi_a[i]);
        }
        if margin >= cutoff {
            outliers_plus.insert(pi_a[i]);
            r_plus += 1;
        }
    }
    for j in 0..s {
        let margin = model.b_hat(j) - edge.omega_a_edge;
        if margin > 0.0 {
            outliers.insert(pi_b[j]);
        }
        if margin >= cutoff {
            outliers_plus.insert(pi_b[j]);
            s_plus += 1;
        }
    }

    Ok(LabelMap {
        pi_a,
        pi_b,
        outliers,
        outliers_plus,
        r_plus,
        s_plus,
        n,
        r,
        s,
    })
}

/// Per-spike prediction record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpikePrediction {
    pub side: SpikeSide,
    /// Spike index within its side.
    pub index: usize,
    /// Eigenvalue label `pi(index)`.
    pub label: usize,
    /// Spiked value (`a_hat` or `b_hat`).
    pub spiked_value: f64,
    /// Distance to the detection threshold (may be negative).
    pub margin: f64,
    pub status: SpikeStatus,
    /// `Delta = sqrt(margin)` for supercritical spikes.
    pub delta: Option<f64>,
    /// Predicted eigenvalue location (`E_+` unless supercritical).
    pub predicted_location: f64,
    /// Concentration rate bound: `N^{-1/2} Delta` for supercritical spikes,
    /// `N^{-2/3}` otherwise.
    pub rate_bound: f64,
    /// Predicted squared overlap with the spiked direction (supercritical
    /// spikes only).
    pub overlap_g: Option<f64>,
}

/// Full prediction set for a spiked model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionSet {
    pub e_plus: f64,
    pub omega_a_edge: f64,
    pub omega_b_edge: f64,
    pub n: usize,
    pub spikes: Vec<SpikePrediction>,
    /// Minimal distance of any spike to its threshold (absolute); drives
    /// the sticking bound.
    pub gamma: Option<f64>,
    /// `1/(N gamma)` when `gamma` is nondegenerate.
    pub sticking_bound: Option<f64>,
    pub sticking_degenerate: bool,
    /// Extremal non-outlier bound `N^{-2/3}`, applying to ranks up to
    /// `varpi` beyond the supercritical outliers.
    pub nonoutlier_rate_bound: f64,
}

/// Computes outlier-location predictions, rates, overlaps and the sticking
/// data for every spike of the model.
pub fn predict(model: &SpikeModel, labels: &LabelMap, edge: &EdgeData) -> Result<PredictionSet> {
    let n = model.n();
    let nf = n as f64;
    let cutoff = (nf).powf(-1.0 / 3.0);
    let mu_a = model.mu_a()?;
    let mu_b = model.mu_b()?;
    let mut spikes = Vec::with_capacity(model.r() + model.s());
    for i in 0..model.r() {
        let a_hat = model.a_hat(i);
        let margin = a_hat - edge.omega_b_edge;
        let status = status_for(margin, cutoff);
        let (location, rate, delta, overlap) = if status == SpikeStatus::Supercritical {
            let delta = margin.sqrt();
            let loc = inverse_omega_b(edge, &mu_a, &mu_b, a_hat)?;
            let dinv = inverse_omega_b_derivative(edge, &mu_a, &mu_b, a_hat)?;
            let g = a_hat * dinv / loc;
            (loc, nf.powf(-0.5) * delta, Some(delta), Some(g))
        } else {
            (edge.e_plus, nf.powf(-2.0 / 3.0), None, None)
        };
        spikes.push(SpikePrediction {
            side: SpikeSide::A,
            index: i,
            label: labels.pi_a(i),
            spiked_value: a_hat,
            margin,
            status,
            delta,
            predicted_location: location,
            rate_bound: rate,
            overlap_g: overlap,
        });
    }
    for j in 0..model.s() {
        let b_hat = model.b_hat(j);
        let margin = b_hat - edge.omega_a_edge;
        let status = status_for(margin, cutoff);
        let (location, rate, delta, overlap) = if status == SpikeStatus::Supercritical {
            let delta = margin.sqrt();
            let loc = inverse_omega_a(edge, &mu_a, &mu_b, b_hat)?;
            let dinv = inverse_omega_a_derivative(edge, &mu_a, &mu_b, b_hat)?;
            let g = b_hat * dinv / loc;
            (loc, nf.powf(-0.5) * delta, Some(delta), Some(g))
        } else {
            (edge.e_plus, nf.powf(-2.0 / 3.0), None, None)
        };
        spikes.push(SpikePrediction {
            side: SpikeSide::B,
            index: j,
            label: labels.pi_b(j),
            spiked_value: b_hat,
            margin,
            status,
            delta,
            predicted_location: location,
            rate_bound: rate,
            overlap_g: overlap,
        });
    }

    let (gamma, sticking_bound, degenerate) = sticking_parameters(model, edge)?;

    Ok(PredictionSet {
        e_plus: edge.e_plus,
        omega_a_edge: edge.omega_a_edge,
        omega_b_edge: edge.omega_b_edge,
        n,
        spikes,
        gamma,
        sticking_bound,
        sticking_degenerate: degenerate,
        nonoutlier_rate_bound: nf.powf(-2.0 / 3.0),
    })
}

fn status_for(margin: f64, cutoff: f64) -> SpikeStatus {
    if margin >= cutoff {
        SpikeStatus::Supercritical
    } else if margin > 0.0 {
        SpikeStatus::NearCritical
    } else {
        SpikeStatus::Subcritical
    }
}

fn sticking_parameters(
    model: &SpikeModel,
    edge: &EdgeData,
) -> Result<(Option<f64>, Option<f64>, bool)> {
    if model.r() + model.s() == 0 {
        return Ok((None, None, false));
    }
    let mut gamma = f64::INFINITY;
    for i in 0..model.r() {
        gamma = gamma.min((model.a_hat(i) - edge.omega_b_edge).abs());
    }
    for j in 0..model.s() {
        gamma = gamma.min((model.b_hat(j) - edge.omega_a_edge).abs());
    }
    let degenerate = gamma <= 1e-12;
    let bound = if degenerate {
        None
    } else {
        Some(1.0 / (model.n() as f64 * gamma))
    };
    Ok((Some(gamma), bound, degenerate))
}

/// `gamma` and the sticking bound `1/(N gamma)` of the eigenvalue-sticking
/// theorem. Errors when the model has no spikes (the minimum is vacuous);
/// flags, rather than divides by, a zero margin.
pub fn sticking_bound(model: &SpikeModel, edge: &EdgeData) -> Result<(f64, Option<f64>)> {
    if model.r() + model.s() == 0 {
        return Err(Error::Domain(
            "sticking bound undefined for a model without spikes".into(),
        ));
    }
    let (gamma, bound, _) = sticking_parameters(model, edge)?;
    Ok((gamma.expect("spikes present"), bound))
}

/// Pairwise separation table for an outlier set `S` (labels), covering both
/// the spike-to-spike distances and the distances to the bulk entries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeparationTable {
    /// `delta_{pi_a(i)}(S)` for every a-index `i` in `0..N`.
    pub for_a_index: Vec<f64>,
    /// `delta_{pi_b(j)}(S)` for every b-index `j` in `0..N`.
    pub for_b_index: Vec<f64>,
}

/// Computes the separation quantities `delta_frak{a}(S)` of the overlap
/// theorem for all indices at once.
///
/// For an a-index `i` with label inside `S` the distance is measured to
/// everything *outside* `S`: other a-values via `|a_hat_i - a_hat_k|` and
/// b-values via `|b_hat_j - Omega_A(Omega_B^{-1}(a_hat_i))|`. For labels
/// outside `S` the roles flip. Mirror definitions apply on the b-side.
pub fn separations(
    model: &SpikeModel,
    labels: &LabelMap,
    edge: &EdgeData,
    s_set: &BTreeSet<usize>,
) -> Result<SeparationTable> {
    if !s_set.is_subset(&labels.outliers_plus) {
        return Err(Error::Domain(format!(
            "S = {s_set:?} is not a subset of the supercritical outliers {:?}",
            labels.outliers_plus
        )));
    }
    let n = model.n();
    let mu_a = model.mu_a()?;
    let mu_b = model.mu_b()?;
    let opts = SolverOptions::default();

    // Values of each spiked diagonal entry, by original index.
    let a_val: Vec<f64> = (0..n).map(|i| model.a_hat(i)).collect();
    let b_val: Vec<f64> = (0..n).map(|j| model.b_hat(j)).collect();

    // Forward images Omega_A(Omega_B^{-1}(a_hat_i)) for supercritical
    // a-spikes in S, and the mirror for b-spikes in S.
    let mut image_a: Vec<Option<f64>> = vec![None; model.r()];
    let mut image_b: Vec<Option<f64>> = vec![None; model.s()];
    for i in 0..model.r() {
        if s_set.contains(&labels.pi_a(i)) {
            let x = inverse_omega_b(edge, &mu_a, &mu_b, a_val[i])?;
            let sub = subordination::solve(&mu_a, &mu_b, Complex64::new(x, 0.0), &opts)?;
            image_a[i] = Some(sub.omega_a.re);
        }
    }
    for j in 0..model.s() {
        if s_set.contains(&labels.pi_b(j)) {
            let x = inverse_omega_a(edge, &mu_a, &mu_b, b_val[j])?;
            let sub = subordination::solve(&mu_a, &mu_b, Complex64::new(x, 0.0), &opts)?;
            image_b[j] = Some(sub.omega_b.re);
        }
    }

    let in_s_a = |k: usize| k < model.r() && s_set.contains(&labels.pi_a(k));
    let in_s_b = |k: usize| k < model.s() && s_set.contains(&labels.pi_b(k));

    let mut for_a_index = vec![f64::INFINITY; n];
    for i in 0..n {
        let mut best = f64::INFINITY;
        if in_s_a(i) {
            // delta over everything outside S.
            for (k, &ak) in a_val.iter().enumerate() {
                if !in_s_a(k) {
                    best = best.min((a_val[i] - ak).abs());
                }
            }
            let img = image_a[i].expect("computed for S members");
            for (j, &bj) in b_val.iter().enumerate() {
                if !in_s_b(j) {
                    best = best.min((bj - img).abs());
                }
            }
        } else {
            // delta over the S members, using their forward images.
            for k in 0..model.r() {
                if in_s_a(k) {
                    best = best.min((a_val[k] - a_val[i]).abs());
                }
            }
            for j in 0..model.s() {
                if in_s_b(j) {
                    let img = image_b[j].expect("computed for S members");
                    best = best.min((a_val[i] - img).abs());
                }
            }
        }
        for_a_index[i] = best;
    }

    let mut for_b_index = vec![f64::INFINITY; n];
    for j in 0..n {
        let mut best = f64::INFINITY;
        if in_s_b(j) {
            for (k, &bk) in b_val.iter().enumerate() {
                if !in_s_b(k) {
                    best = best.min((b_val[j] - bk).abs());
                }
            }
            let img = image_b[j].expect("computed for S members");
            for (i, &ai) in a_val.iter().enumerate() {
                if !in_s_a(i) {
                    best = best.min((ai - img).abs());
                }
            }
        } else {
            for k in 0..model.s() {
                if in_s_b(k) {
                    best = best.min((b_val[k] - b_val[j]).abs());
                }
            }
            for i in 0..model.r() {
                if in_s_a(i) {
                    let img = image_a[i].expect("computed for S members");
                    best = best.min((b_val[j] - img).abs());
                }
            }
        }
        for_b_index[j] = best;
    }

    Ok(SeparationTable {
        for_a_index,
        for_b_index,
    })
}

/// Overlap predictions for a deterministic direction `v` and an outlier set
/// `S`: the limits `g_a(v, S)`, `g_b(v, S)` and the theorem's three-term
/// error budgets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlapPrediction {
    pub g_a: f64,
    pub g_b: f64,
    pub error_budget_a: f64,
    pub error_budget_b: f64,
}

/// Evaluates `g_a(v, S) = sum_{i: pi_a(i) in S} a_hat_i (O_B^-1)'(a_hat_i)
/// / O_B^-1(a_hat_i) |v_i|^2` (and the mirror `g_b`), together with the
/// error budgets built from the separation table.
pub fn predict_overlaps(
    model: &SpikeModel,
    labels: &LabelMap,
    edge: &EdgeData,
    s_set: &BTreeSet<usize>,
    v: &[f64],
) -> Result<OverlapPrediction> {
    if v.len() != model.n() {
        return Err(Error::Config(format!(
            "direction length {} does not match N = {}",
            v.len(),
            model.n()
        )));
    }
    if !s_set.is_subset(&labels.outliers_plus) {
        return Err(Error::Domain(format!(
            "S = {s_set:?} is not a subset of the supercritical outliers {:?}",
            labels.outliers_plus
        )));
    }
    let n = model.n();
    let nf = n as f64;
    let mu_a = model.mu_a()?;
    let mu_b = model.mu_b()?;
    let seps = separations(model, labels, edge, s_set)?;

    let mut g_a = 0.0;
    let mut term1_a = 0.0;
    for i in 0..model.r() {
        if s_set.contains(&labels.pi_a(i)) {
            let a_hat = model.a_hat(i);
            let loc = inverse_omega_b(edge, &mu_a, &mu_b, a_hat)?;
            let dinv = inverse_omega_b_derivative(edge, &mu_a, &mu_b, a_hat)?;
            let v2 = v[i] * v[i];
            g_a += a_hat * dinv / loc * v2;
            term1_a += v2 / (nf * (a_hat - edge.omega_b_edge)).sqrt();
        }
    }
    let mut term2_a = 0.0;
    let mut term3_inner_a = 0.0;
    for i in 0..n {
        let v2 = v[i] * v[i];
        let d = seps.for_a_index[i];
        term2_a += v2 / (nf * d);
        let in_s = i < model.r() && s_set.contains(&labels.pi_a(i));
        if !in_s {
            term3_inner_a += v2 / (nf * d);
        }
    }
    let budget_a = term1_a + term2_a + g_a.max(0.0).sqrt() * term3_inner_a.sqrt();

    let mut g_b = 0.0;
    let mut term1_b = 0.0;
    for j in 0..model.s() {
        if s_set.contains(&labels.pi_b(j)) {
            let b_hat = model.b_hat(j);
            let loc = inverse_omega_a(edge, &mu_a, &mu_b, b_hat)?;
            let dinv = inverse_omega_a_derivative(edge, &mu_a, &mu_b, b_hat)?;
            let v2 = v[j] * v[j];
            g_b += b_hat * dinv / loc * v2;
            term1_b += v2 / (nf * (b_hat - edge.omega_a_edge)).sqrt();
        }
    }
    let mut term2_b = 0.0;
    let mut term3_inner_b = 0.0;
    for j in 0..n {
        let v2 = v[j] * v[j];
        let d = seps.for_b_index[j];
        term2_b += v2 / (nf * d);
        let in_s = j < model.s() && s_set.contains(&labels.pi_b(j));
        if !in_s {
            term3_inner_b += v2 / (nf * d);
        }
    }
    let budget_b = term1_b + term2_b + g_b.max(0.0).sqrt() * term3_inner_b.sqrt();

    Ok(OverlapPrediction {
        g_a,
        g_b,
        error_budget_a: budget_a,
        error_budget_b: budget_b,
    })
}

/// Delocalization bound for the left eigenvector with label `pi_a(i)` of a
/// non-supercritical rank `i`: `sum_j |v_j|^2 / (N (kappa_i + |a_hat_j -
/// Omega_B(E_+)|^2))` with `kappa_i = i^{2/3} N^{-2/3}` (1-based rank).
pub fn nonoutlier_bound_left(
    model: &SpikeModel,
    labels: &LabelMap,
    edge: &EdgeData,
    i: usize,
    v: &[f64],
    tau: f64,
) -> Result<f64> {
    let n = model.n();
    if v.len() != n {
        return Err(Error::Config("direction length mismatch".into()));
    }
    if labels.outliers_plus.contains(&labels.pi_a(i)) {
        return Err(Error::Domain(format!(
            "rank {i} labels a supercritical outlier; the bound covers non-outliers"
        )));
    }
    if (i + 1) as f64 > tau * n as f64 {
        return Err(Error::Domain(format!(
            "rank {i} outside the bulk range tau N = {}",
            tau * n as f64
        )));
    }
    let nf = n as f64;
    let kappa = ((i + 1) as f64).powf(2.0 / 3.0) * nf.powf(-2.0 / 3.0);
    let mut sum = 0.0;
    for j in 0..n {
        let gap = model.a_hat(j) - edge.omega_b_edge;
        sum += v[j] * v[j] / (nf * (kappa + gap * gap));
    }
    Ok(sum)
}

/// Mirror of [`nonoutlier_bound_left`] for right eigenvectors.
pub fn nonoutlier_bound_right(
    model: &SpikeModel,
    labels: &LabelMap,
    edge: &EdgeData,
    j: usize,
    v: &[f64],
    tau: f64,
) -> Result<f64> {
    let n = model.n();
    if v.len() != n {
        return Err(Error::Config("direction length mismatch".into()));
    }
    if labels.outliers_plus.contains(&labels.pi_b(j)) {
        return Err(Error::Domain(format!(
            "rank {j} labels a supercritical outlier; the bound covers non-outliers"
        )));
    }
    if (j + 1) as f64 > tau * n as f64 {
        return Err(Error::Domain(format!(
            "rank {j} outside the bulk range tau N = {}",
            tau * n as f64
        )));
    }
    let nf = n as f64;
    let kappa = ((j + 1) as f64).powf(2.0 / 3.0) * nf.powf(-2.0 / 3.0);
    let mut sum = 0.0;
    for i in 0..n {
        let gap = model.b_hat(i) - edge.omega_a_edge;
        sum += v[i] * v[i] / (nf * (kappa + gap * gap));
    }
    Ok(sum)
}

/// The `r + s` asymptotic master-equation factors at a real `x > E_+`:
///
/// ```text
/// (d_i^a + 1)/d_i^a + Omega_B(x)/(a_i - Omega_B(x)),    i < r,
/// (d_j^b + 1)/d_j^b + Omega_A(x)/(b_j - Omega_A(x)),    j < s.
/// ```
///
/// The factor of a supercritical spike vanishes exactly at its predicted
/// outlier location.
pub fn master_equation_factors(model: &SpikeModel, edge: &EdgeData, x: f64) -> Result<Vec<f64>> {
    if x <= edge.e_plus {
        return Err(Error::Domain(format!(
            "asymptotic master equation needs x > E_+ = {}, got {x}",
            edge.e_plus
        )));
    }
    let mu_a = model.mu_a()?;
    let mu_b = model.mu_b()?;
    let sub = subordination::solve(
        &mu_a,
        &mu_b,
        Complex64::new(x, 0.0),
        &SolverOptions::default(),
    )?;
    let (oa, ob) = (sub.omega_a.re, sub.omega_b.re);
    let mut factors = Vec::with_capacity(model.r() + model.s());
    for i in 0..model.r() {
        let d = model.d_a()[i];
        if d == 0.0 {
            factors.push(f64::INFINITY);
            continue;
        }
        factors.push(((d + 1.0) / d + ob / (model.base_a()[i] - ob)).abs());
    }
    for j in 0..model.s() {
        let d = model.d_b()[j];
        if d == 0.0 {
            factors.push(f64::INFINITY);
            continue;
        }
        factors.push(((d + 1.0) / d + oa / (model.base_b()[j] - oa)).abs());
    }
    Ok(factors)
}

/// Finite-N master-equation determinant `det(D^{-1} + x U* G(x) U)` given
/// the `(r+s) x (r+s)` resolvent block `U* G(x) U` of the unspiked
/// linearization (see `rmt::u_g_u_block`).
pub fn master_equation_determinant(
    model: &SpikeModel,
    ugu: &ndarray::Array2<f64>,
    x: f64,
) -> Result<f64> {
    let (r, s) = (model.r(), model.s());
    let k = r + s;
    if ugu.nrows() != k || ugu.ncols() != k {
        return Err(Error::Config(format!(
            "resolvent block is {}x{}, expected {k}x{k}",
            ugu.nrows(),
            ugu.ncols()
        )));
    }
    let mut m = ugu.mapv(|v| v * x);
    for i in 0..r {
        let d = model.d_a()[i];
        if d == 0.0 {
            return Err(Error::Domain("zero spike has no master equation".into()));
        }
        m[(i, i)] += (d + 1.0) / d;
    }
    for j in 0..s {
        let d = model.d_b()[j];
        if d == 0.0 {
            return Err(Error::Domain("zero spike has no master equation".into()));
        }
        m[(r + j, r + j)] += (d + 1.0) / d;
    }
    Ok(det_small(&m))
}

/// Determinant by partial-pivot Gaussian elimination; the master-equation
/// blocks are at most 32x32.
fn det_small(m: &ndarray::Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut a = m.clone();
    let mut det = 1.0;
    for k in 0..n {
        let mut piv = k;
        for i in k + 1..n {
            if a[(i, k)].abs() > a[(piv, k)].abs() {
                piv = i;
            }
        }
        if a[(piv, k)] == 0.0 {
            return 0.0;
        }
        if piv != k {
            for j in 0..n {
                let t = a[(k, j)];
                a[(k, j)] = a[(piv, j)];
                a[(piv, j)] = t;
            }
            det = -det;
        }
        det *= a[(k, k)];
        for i in k + 1..n {
            let f = a[(i, k)] / a[(k, k)];
            for j in k..n {
                a[(i, j)] -= f * a[(k, j)];
            }
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::locate_upper_edge;
    use crate::measure::DensitySpec;

    fn uniform_model(n: usize, d_a: Vec<f64>, d_b: Vec<f64>) -> SpikeModel {
        let spec = DensitySpec::uniform(0.5, 1.5).unwrap();
        SpikeModel::from_specs(&spec, &spec, n, d_a, d_b).unwrap()
    }

    fn model_edge(model: &SpikeModel) -> EdgeData {
        locate_upper_edge(&model.mu_a().unwrap(), &model.mu_b().unwrap()).unwrap()
    }

    #[test]
    fn spiked_values_and_sorting() {
        let model = SpikeModel::new(
            vec![3.0, 2.0, 1.0],
            vec![1.0, 1.0, 1.0],
            vec![0.1, 2.0],
            vec![],
        )
        .unwrap();
        assert_eq!(model.a_hat(0), 3.0 * 1.1);
        assert_eq!(model.a_hat(1), 2.0 * 3.0);
        // Re-sorted descending: 6.0 > 3.3 > 1.0.
        let sa = model.spiked_a();
        assert_eq!(sa[0], 6.0);
        assert!((sa[1] - 3.3).abs() <= 1e-14);
        assert_eq!(sa[2], 1.0);
        assert!(SpikeModel::new(vec![1.0], vec![1.0], vec![-0.5], vec![]).is_err());
    }

    #[test]
    fn json_wire_form() {
        let m = SpikeModel::from_json(r#"{"base":{"kind":"uniform","lo":0.5,"hi":1.5},"N":100,"d_a":[2.0],"d_b":[]}"#)
            .unwrap();
        assert_eq!(m.n(), 100);
        assert_eq!(m.r(), 1);
        assert_eq!(m.s(), 0);
        let m2 = SpikeModel::from_json(
            r#"{"base_a":{"kind":"uniform","lo":0.5,"hi":1.5},"base_b":{"kind":"uniform","lo":0.6,"hi":1.4},"N":50,"d_a":[],"d_b":[1.0]}"#,
        )
        .unwrap();
        assert_eq!(m2.s(), 1);
        assert!(SpikeModel::from_json(r#"{"N":10}"#).is_err());
    }

    #[test]
    fn classify_no_spikes() {
        let model = uniform_model(100, vec![], vec![]);
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        assert!(labels.outliers.is_empty());
        assert!(labels.outliers_plus.is_empty());
        assert_eq!(labels.r_plus, 0);
        assert_eq!(labels.s_plus, 0);
        // Unspiked indices map straight through.
        assert_eq!(labels.pi_a(5), 5);
        assert_eq!(labels.pi_b(7), 7);
    }

    #[test]
    fn classify_identity_single_spike() {
        // B = delta-like: threshold is a_max, one clear a-spike.
        let n = 64;
        let base_b = vec![1.0; n];
        let spec = DensitySpec::uniform(0.5, 1.5).unwrap();
        let mut base_a = discretize(&spec, n).unwrap().atoms().to_vec();
        base_a.reverse();
        let a_max = base_a[0];
        let d = (a_max + 1.0) / a_max - 1.0; // a_hat = a_max + 1
        let model = SpikeModel::new(base_a, base_b, vec![d], vec![]).unwrap();
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        assert_eq!(labels.r_plus, 1);
        assert_eq!(labels.pi_a(0), 0);
        assert!(labels.outliers_plus.contains(&0));
    }

    #[test]
    fn classify_orders_mixed_spikes() {
        // Two spikes; the one with the larger predicted location gets label 0.
        let model = uniform_model(200, vec![1.5], vec![0.8]);
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        let mu_a = model.mu_a().unwrap();
        let mu_b = model.mu_b().unwrap();
        let loc_a = inverse_omega_b(&edge, &mu_a, &mu_b, model.a_hat(0)).unwrap();
        let loc_b = inverse_omega_a(&edge, &mu_a, &mu_b, model.b_hat(0)).unwrap();
        if loc_a > loc_b {
            assert_eq!(labels.pi_a(0), 0);
            assert_eq!(labels.pi_b(0), 1);
        } else {
            assert_eq!(labels.pi_b(0), 0);
            assert_eq!(labels.pi_a(0), 1);
        }
        // Bijectivity on the spiked labels.
        let mut all: Vec<usize> = labels.pi_a.iter().chain(&labels.pi_b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1]);
    }

    #[test]
    fn predictions_identity_reduction_exact() {
        // B = I: Q1_hat = A_hat exactly, so location = a_hat and g = 1.
        let n = 64;
        let base_b = vec![1.0; n];
        let spec = DensitySpec::uniform(0.5, 1.5).unwrap();
        let mut base_a = discretize(&spec, n).unwrap().atoms().to_vec();
        base_a.reverse();
        let model = SpikeModel::new(base_a, base_b, vec![0.9], vec![]).unwrap();
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        let pred = predict(&model, &labels, &edge).unwrap();
        let sp = &pred.spikes[0];
        assert_eq!(sp.status, SpikeStatus::Supercritical);
        assert!(
            (sp.predicted_location - model.a_hat(0)).abs() <= 1e-9 * model.a_hat(0),
            "location {} vs a_hat {}",
            sp.predicted_location,
            model.a_hat(0)
        );
        let g = sp.overlap_g.unwrap();
        assert!((g - 1.0).abs() <= 1e-7, "overlap {g}");
    }

    #[test]
    fn subcritical_predicts_edge() {
        let n = 1000;
        // Margin below the N^{-1/3} cutoff: a tiny spike.
        let model = uniform_model(n, vec![0.01], vec![]);
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        let pred = predict(&model, &labels, &edge).unwrap();
        let sp = &pred.spikes[0];
        assert_eq!(sp.status, SpikeStatus::Subcritical);
        assert_eq!(sp.predicted_location, edge.e_plus);
        assert!((sp.rate_bound - (n as f64).powf(-2.0 / 3.0)).abs() <= 1e-15);
    }

    #[test]
    fn monotone_locations_in_spike_size() {
        let model = uniform_model(300, vec![1.2, 0.9], vec![]);
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        let pred = predict(&model, &labels, &edge).unwrap();
        assert!(pred.spikes[0].predicted_location > pred.spikes[1].predicted_location);
        assert_eq!(pred.spikes[0].label, 0);
        assert_eq!(pred.spikes[1].label, 1);
    }

    #[test]
    fn sticking_bound_plugin() {
        // Margin exactly 0.5 by construction.
        let n = 1000;
        let spec = DensitySpec::uniform(0.5, 1.5).unwrap();
        let base = {
            let mut v = discretize(&spec, n).unwrap().atoms().to_vec();
            v.reverse();
            v
        };
        let mu = AtomicMeasure::from_diagonal(&base, "m").unwrap();
        let edge = locate_upper_edge(&mu, &mu).unwrap();
        let a_hat_target = edge.omega_b_edge + 0.5;
        let d = a_hat_target / base[0] - 1.0;
        let model = SpikeModel::new(base.clone(), base, vec![d], vec![]).unwrap();
        let (gamma, bound) = sticking_bound(&model, &edge).unwrap();
        assert!((gamma - 0.5).abs() <= 1e-12);
        assert!((bound.unwrap() - 1.0 / 500.0).abs() <= 1e-12);
        // No spikes: domain error.
        let empty = uniform_model(100, vec![], vec![]);
        assert!(sticking_bound(&empty, &edge).is_err());
    }

    #[test]
    fn sticking_degenerate_at_threshold() {
        let n = 200;
        let spec = DensitySpec::uniform(0.5, 1.5).unwrap();
        let base = {
            let mut v = discretize(&spec, n).unwrap().atoms().to_vec();
            v.reverse();
            v
        };
        let mu = AtomicMeasure::from_diagonal(&base, "m").unwrap();
        let edge = locate_upper_edge(&mu, &mu).unwrap();
        let d = edge.omega_b_edge / base[0] - 1.0; // spike exactly at threshold
        let model = SpikeModel::new(base.clone(), base, vec![d], vec![]).unwrap();
        let labels = classify(&model, &edge).unwrap();
        let pred = predict(&model, &labels, &edge).unwrap();
        assert!(pred.sticking_degenerate);
        assert!(pred.sticking_bound.is_none());
    }

    #[test]
    fn overlap_identity_cases() {
        let n = 64;
        let base_b = vec![1.0; n];
        let spec = DensitySpec::uniform(0.5, 1.5).unwrap();
        let mut base_a = discretize(&spec, n).unwrap().atoms().to_vec();
        base_a.reverse();
        let model = SpikeModel::new(base_a, base_b, vec![1.0], vec![]).unwrap();
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        let s: BTreeSet<usize> = labels.outliers_plus.clone();
        // v = e_0: g_a = 1 exactly for B = I.
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        let pred = predict_overlaps(&model, &labels, &edge, &s, &v).unwrap();
        assert!((pred.g_a - 1.0).abs() <= 1e-7, "g_a = {}", pred.g_a);
        // v orthogonal to the spike: empty sum.
        let mut w = vec![0.0; n];
        w[5] = 1.0;
        let pred0 = predict_overlaps(&model, &labels, &edge, &s, &w).unwrap();
        assert_eq!(pred0.g_a, 0.0);
        // S beyond the supercritical set is a domain error.
        let mut bad = BTreeSet::new();
        bad.insert(7usize);
        assert!(predict_overlaps(&model, &labels, &edge, &bad, &v).is_err());
    }

    #[test]
    fn overlap_generic_in_unit_interval() {
        let model = uniform_model(400, vec![1.0], vec![]);
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        let s: BTreeSet<usize> = labels.outliers_plus.clone();
        let mut v = vec![0.0; 400];
        v[0] = 1.0;
        let pred = predict_overlaps(&model, &labels, &edge, &s, &v).unwrap();
        assert!(pred.g_a > 0.0 && pred.g_a < 1.0, "g_a = {}", pred.g_a);
        assert!(pred.error_budget_a.is_finite() && pred.error_budget_a > 0.0);
    }

    #[test]
    fn separation_singleton_cross_term() {
        // Singleton S = {pi_a(0)} with one b-spike outside S: the a-side
        // separation at the spike is governed by either the bulk a-entries
        // or the cross term |b_hat_0 - Omega_A(Omega_B^{-1}(a_hat_0))|.
        let model = uniform_model(200, vec![1.5], vec![0.4]);
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        let mut s = BTreeSet::new();
        s.insert(labels.pi_a(0));
        let table = separations(&model, &labels, &edge, &s).unwrap();
        // Independent recomputation of the two candidate minima.
        let mu_a = model.mu_a().unwrap();
        let mu_b = model.mu_b().unwrap();
        let x = inverse_omega_b(&edge, &mu_a, &mu_b, model.a_hat(0)).unwrap();
        let sub = subordination::solve(
            &mu_a,
            &mu_b,
            Complex64::new(x, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        let img = sub.omega_a.re;
        let mut expected = f64::INFINITY;
        for k in 0..200 {
            let in_s_a = k == 0;
            if !in_s_a {
                expected = expected.min((model.a_hat(0) - model.a_hat(k)).abs());
            }
        }
        for j in 0..200 {
            expected = expected.min((model.b_hat(j) - img).abs());
        }
        assert!(
            (table.for_a_index[0] - expected).abs() <= 1e-12,
            "{} vs {}",
            table.for_a_index[0],
            expected
        );
    }

    #[test]
    fn separation_composition_identity() {
        // B = I: Omega_A(Omega_B^{-1}(a_hat)) = M_A(a_hat) through the solver.
        let n = 100;
        let base_b = vec![1.0; n];
        let spec = DensitySpec::uniform(0.5, 1.5).unwrap();
        let mut base_a = discretize(&spec, n).unwrap().atoms().to_vec();
        base_a.reverse();
        let model = SpikeModel::new(base_a, base_b, vec![1.0], vec![]).unwrap();
        let edge = model_edge(&model);
        let mu_a = model.mu_a().unwrap();
        let mu_b = model.mu_b().unwrap();
        let a_hat = model.a_hat(0);
        let x = inverse_omega_b(&edge, &mu_a, &mu_b, a_hat).unwrap();
        let sub = subordination::solve(
            &mu_a,
            &mu_b,
            Complex64::new(x, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        let direct = mu_a.m_transform(Complex64::new(a_hat, 0.0)).unwrap().re;
        assert!(
            (sub.omega_a.re - direct).abs() <= 1e-8 * (1.0 + direct.abs()),
            "{} vs {}",
            sub.omega_a.re,
            direct
        );
    }

    #[test]
    fn degenerate_equal_spikes_zero_separation() {
        // Two spikes with exactly equal spiked values, one in S and one out:
        // the separation collapses to 0 (budget vacuous). With both in S the
        // separation to the outside is positive again.
        let spec = DensitySpec::uniform(0.5, 1.5).unwrap();
        let n = 150;
        let base = {
            let mut v = discretize(&spec, n).unwrap().atoms().to_vec();
            v.reverse();
            v
        };
        let mu = AtomicMeasure::from_diagonal(&base, "m").unwrap();
        let edge = locate_upper_edge(&mu, &mu).unwrap();
        let target = edge.omega_b_edge + 0.6;
        let d: Vec<f64> = (0..2).map(|k| target / base[k] - 1.0).collect();
        let model = SpikeModel::new(base.clone(), base, d, vec![]).unwrap();
        assert_eq!(model.a_hat(0), model.a_hat(1));
        let labels = classify(&model, &edge).unwrap();
        let mut s = BTreeSet::new();
        s.insert(labels.pi_a(0));
        let table = separations(&model, &labels, &edge, &s).unwrap();
        assert_eq!(table.for_a_index[0], 0.0);
        let both: BTreeSet<usize> = labels.outliers_plus.clone();
        let table2 = separations(&model, &labels, &edge, &both).unwrap();
        assert!(table2.for_a_index[0] > 0.0);
    }

    #[test]
    fn nonoutlier_bound_values() {
        let n = 1000;
        let model = uniform_model(n, vec![1.2], vec![]);
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        // Direction of the supercritical spike, non-outlier rank i=1 (0-based).
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        let b = nonoutlier_bound_left(&model, &labels, &edge, 1, &v, 0.1).unwrap();
        let margin = model.a_hat(0) - edge.omega_b_edge;
        let kappa = 2.0f64.powf(2.0 / 3.0) * (n as f64).powf(-2.0 / 3.0);
        let expected = 1.0 / (n as f64 * (kappa + margin * margin));
        assert!((b - expected).abs() <= 1e-15 * expected.max(1.0));
        // O(1/N) when the margin is order one.
        assert!(b <= 10.0 / n as f64);
        // Uniform direction over near-threshold entries gives ~ N^{-1/3}/kappa-type scale.
        let v_uniform = vec![(1.0 / n as f64).sqrt(); n];
        let b2 = nonoutlier_bound_left(&model, &labels, &edge, 1, &v_uniform, 0.1).unwrap();
        assert!(b2 > 0.0 && b2 < 1.0);
        // The supercritical rank itself is rejected.
        assert!(nonoutlier_bound_left(&model, &labels, &edge, 0, &v, 0.1).is_err());
        // Out-of-range rank errors.
        assert!(nonoutlier_bound_left(&model, &labels, &edge, 900, &v, 0.1).is_err());
    }

    #[test]
    fn master_equation_asymptotic_zero_at_location() {
        let model = uniform_model(400, vec![1.1], vec![]);
        let edge = model_edge(&model);
        let labels = classify(&model, &edge).unwrap();
        let pred = predict(&model, &labels, &edge).unwrap();
        let loc = pred.spikes[0].predicted_location;
        let f = master_equation_factors(&model, &edge, loc).unwrap();
        assert!(f[0] <= 1e-8, "factor {} at predicted location", f[0]);
        // Far above all outliers the factor is bounded away from zero.
        let f_far = master_equation_factors(&model, &edge, loc + 5.0).unwrap();
        assert!(f_far[0] >= 0.1, "far factor {}", f_far[0]);
        // Inside the support: domain error.
        assert!(master_equation_factors(&model, &edge, edge.e_plus * 0.5).is_err());
    }

    #[test]
    fn master_equation_root_iff_supercritical() {
        // Scan factor signs on (E_+, inf): a sign change exists iff the
        // spike exceeds its threshold.
        let n = 400;
        let spec = DensitySpec::uniform(0.5, 1.5).unwrap();
        let base = {
            let mut v = discretize(&spec, n).unwrap().atoms().to_vec();
            v.reverse();
            v
        };
        let mu = AtomicMeasure::from_diagonal(&base, "m").unwrap();
        let edge = locate_upper_edge(&mu, &mu).unwrap();
        for (margin, expect_root) in [(0.4, true), (-0.02, false)] {
            let a_hat = edge.omega_b_edge + margin;
            let d = a_hat / base[0] - 1.0;
            if d <= 0.0 && expect_root {
                panic!("test construction broken");
            }
            let d = d.max(1e-6);
            let model = SpikeModel::new(base.clone(), base.clone(), vec![d], vec![]).unwrap();
            let mu_a = model.mu_a().unwrap();
            let mu_b = model.mu_b().unwrap();
            let signed = |x: f64| {
                let sub = subordination::solve(
                    &mu_a,
                    &mu_b,
                    Complex64::new(x, 0.0),
                    &SolverOptions::default(),
                )
                .unwrap();
                let ob = sub.omega_b.re;
                let dd = model.d_a()[0];
                (dd + 1.0) / dd + ob / (model.base_a()[0] - ob)
            };
            let xs: Vec<f64> = (1..60).map(|k| edge.e_plus + 0.05 * k as f64).collect();
            let has_sign_change = xs.windows(2).any(|w| signed(w[0]) * signed(w[1]) < 0.0)
                || signed(xs[0]) < 0.0;
            assert_eq!(
                has_sign_change, expect_root,
                "margin {margin}: sign-change {has_sign_change}"
            );
        }
    }

    #[test]
    fn det_small_matches_cofactor() {
        let m = ndarray::array![[2.0, 1.0, 0.5], [0.0, 3.0, 1.0], [1.0, 0.0, 1.5]];
        // Cofactor expansion oracle: 2*(4.5-0) - 1*(0-1) + 0.5*(0-3) = 8.5.
        assert!((det_small(&m) - 8.5).abs() <= 1e-12);
    }
}
