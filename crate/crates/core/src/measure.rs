//! Probability measures on the positive half-line and their analytic
//! transforms.
//!
//! Two carriers exist side by side: [`AtomicMeasure`] is the concrete,
//! solver-facing object (finitely many atoms, the empirical spectral
//! distribution of a diagonal matrix), while [`DensitySpec`] describes an
//! absolutely continuous limit law used for discretization and validation.
//! The two are tied together by [`discretize`] and [`levy_distance`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous, ContinuousCDF};
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Absolute tolerance for merging duplicate atoms at construction.
pub const ATOM_MERGE_TOL: f64 = 1e-12;

/// Allowed defect of the total weight from 1.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Allowed defect of the mean from 1 for normalized density specs.
pub const MEAN_TOL: f64 = 1e-10;

/// Guard distance deciding whether a real evaluation point sits on an atom.
const ON_ATOM_TOL: f64 = 1e-14;

/// Atomic probability measure on `(0, inf)`: sorted strictly ascending
/// atoms with positive weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    atoms: Vec<f64>,
    weights: Vec<f64>,
    label: String,
}

impl AtomicMeasure {
    /// Builds a measure from raw atoms/weights. Atoms are sorted and
    /// duplicates (within [`ATOM_MERGE_TOL`] absolutely) are merged by
    /// summing their weights.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::Config(format!(
                "atomic measure needs matching non-empty atoms/weights, got {}/{}",
                atoms.len(),
                weights.len()
            )));
        }
        let mut pairs: Vec<(f64, f64)> = atoms.into_iter().zip(weights).collect();
        for &(a, w) in &pairs {
            if !a.is_finite() || a <= 0.0 {
                return Err(Error::Config(format!("atom {a} is not strictly positive")));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::Config(format!("weight {w} is not strictly positive")));
            }
        }
        pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
        for (a, w) in pairs {
            match merged.last_mut() {
                Some(last) if a - last.0 <= ATOM_MERGE_TOL => last.1 += w,
                _ => merged.push((a, w)),
            }
        }
        let total: f64 = merged.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Config(format!(
                "weights sum to {total}, which is farther than {WEIGHT_SUM_TOL} from 1"
            )));
        }
        Ok(Self {
            atoms: merged.iter().map(|p| p.0).collect(),
            weights: merged.iter().map(|p| p.1).collect(),
            label: label.into(),
        })
    }

    /// The point mass at `x`.
    pub fn point_mass(x: f64) -> Self {
        Self::new(vec![x], vec![1.0], format!("delta({x})")).expect("point mass is valid")
    }

    /// Equal-weight measure on the entries of a diagonal matrix.
    pub fn from_diagonal(values: &[f64], label: impl Into<String>) -> Result<Self> {
        let w = 1.0 / values.len() as f64;
        Self::new(values.to_vec(), vec![w; values.len()], label)
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn min_atom(&self) -> f64 {
        self.atoms[0]
    }

    pub fn max_atom(&self) -> f64 {
        *self.atoms.last().unwrap()
    }

    pub fn mean(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(a, w)| a * w)
            .sum()
    }

    fn check_off_atoms(&self, z: Complex64) -> Result<()> {
        if z.im == 0.0 {
            for &a in &self.atoms {
                if (z.re - a).abs() <= ON_ATOM_TOL {
                    return Err(Error::Domain(format!(
                        "real evaluation point {} lies on the atom {a} of `{}`",
                        z.re, self.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stieltjes transform `m(z) = sum_k w_k / (x_k - z)`.
    pub fn stieltjes(&self, z: Complex64) -> Result<Complex64> {
        self.check_off_atoms(z)?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (&a, &w) in self.atoms.iter().zip(&self.weights) {
            acc += w / (Complex64::new(a, 0.0) - z);
        }
        Ok(acc)
    }

    /// The auxiliary integral `T(z) = int x/(x - z) dmu(x) = 1 + z m(z)`,
    /// evaluated directly (no cancellation against the constant 1).
    pub fn t_integral(&self, z: Complex64) -> Result<Complex64> {
        self.check_off_atoms(z)?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (&a, &w) in self.atoms.iter().zip(&self.weights) {
            acc += w * a / (Complex64::new(a, 0.0) - z);
        }
        Ok(acc)
    }

    /// M-transform via its integral form `M(z) = 1 - T(z)^{-1}`.
    ///
    /// The rational form `z m/(1 + z m)` is algebraically identical; it is
    /// exposed as [`AtomicMeasure::m_transform_via_stieltjes`] and the two
    /// are cross-checked by the acceptance suite.
    pub fn m_transform(&self, z: Complex64) -> Result<Complex64> {
        let t = self.t_integral(z)?;
        if t.norm() <= ON_ATOM_TOL {
            return Err(Error::Pole(format!(
                "M-transform pole of `{}` at z = {z} (1 + z m = {t:.3e})",
                self.label
            )));
        }
        Ok(Complex64::new(1.0, 0.0) - t.inv())
    }

    /// M-transform via the rational identity `z m(z) / (1 + z m(z))`.
    pub fn m_transform_via_stieltjes(&self, z: Complex64) -> Result<Complex64> {
        let m = self.stieltjes(z)?;
        let denom = Complex64::new(1.0, 0.0) + z * m;
        if denom.norm() <= ON_ATOM_TOL {
            return Err(Error::Pole(format!(
                "rational identity pole of `{}` at z = {z}",
                self.label
            )));
        }
        Ok(z * m / denom)
    }

    /// Exact analytic derivative of the M-transform:
    /// `M'(z) = T'(z)/T(z)^2` with `T'(z) = int x/(x - z)^2 dmu(x)`.
    pub fn m_transform_derivative(&self, z: Complex64) -> Result<Complex64> {
        let t = self.t_integral(z)?;
        if t.norm() <= ON_ATOM_TOL {
            return Err(Error::Pole(format!(
                "M-transform pole of `{}` at z = {z}",
                self.label
            )));
        }
        let mut tp = Complex64::new(0.0, 0.0);
        for (&a, &w) in self.atoms.iter().zip(&self.weights) {
            let d = Complex64::new(a, 0.0) - z;
            tp += w * a / (d * d);
        }
        Ok(tp / (t * t))
    }

    /// L-transform `L(z) = M(z)/z`.
    pub fn l_transform(&self, z: Complex64) -> Result<Complex64> {
        if z.norm() == 0.0 {
            return Err(Error::Domain("L-transform undefined at z = 0".into()));
        }
        Ok(self.m_transform(z)? / z)
    }

    /// Serializes as two-column CSV `atom,weight`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["atom", "weight"])?;
        for (&a, &wt) in self.atoms.iter().zip(&self.weights) {
            w.write_record([format!("{a:.17e}"), format!("{wt:.17e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the two-column CSV form produced by [`AtomicMeasure::write_csv`].
    pub fn read_csv<R: Read>(reader: R, label: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut atoms = Vec::new();
        let mut weights = Vec::new();
        for record in r.records() {
            let record = record?;
            let a: f64 = record
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config("bad atom column in CSV".into()))?;
            let w: f64 = record
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config("bad weight column in CSV".into()))?;
            atoms.push(a);
            weights.push(w);
        }
        Self::new(atoms, weights, label)
    }
}

/// Density shape of an absolutely continuous limit law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DensityKind {
    /// Uniform density on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    /// Density proportional to `(x - lo)^{t_minus} (hi - x)^{t_plus}`,
    /// a rescaled Beta law with edge exponents in `(-1, 1)`.
    BetaLike {
        lo: f64,
        hi: f64,
        t_minus: f64,
        t_plus: f64,
    },
    /// Piecewise-linear density through the nodes `(x[i], rho[i])`.
    Table { x: Vec<f64>, rho: Vec<f64> },
}

#[derive(Deserialize)]
struct RawDensitySpec {
    #[serde(flatten)]
    kind: DensityKind,
    #[serde(default = "default_true")]
    normalize: bool,
}

fn default_true() -> bool {
    true
}

/// Validated density specification with unit total mass and (by default)
/// unit mean, support strictly inside `(0, inf)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(into = "DensityKind")]
pub struct DensitySpec {
    kind: DensityKind,
}

impl From<DensitySpec> for DensityKind {
    fn from(s: DensitySpec) -> DensityKind {
        s.kind
    }
}

impl<'de> Deserialize<'de> for DensitySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawDensitySpec::deserialize(d)?;
        DensitySpec::from_kind(raw.kind, raw.normalize).map_err(serde::de::Error::custom)
    }
}

impl DensitySpec {
    /// Uniform density, rescaled so the mean is 1.
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        Self::from_kind(DensityKind::Uniform { lo, hi }, true)
    }

    /// Beta-like density, rescaled so the mean is 1.
    pub fn beta_like(lo: f64, hi: f64, t_minus: f64, t_plus: f64) -> Result<Self> {
        Self::from_kind(
            DensityKind::BetaLike {
                lo,
                hi,
                t_minus,
                t_plus,
            },
            true,
        )
    }

    /// Piecewise-linear density from a table, normalized to unit mass and
    /// rescaled so the mean is 1.
    pub fn table(x: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        Self::from_kind(DensityKind::Table { x, rho }, true)
    }

    /// Builds a spec from a raw kind. With `normalize` the support is
    /// rescaled to make the mean exactly 1 (and a table's values scaled to
    /// unit mass); without it the input must already satisfy both.
    pub fn from_kind(kind: DensityKind, normalize: bool) -> Result<Self> {
        let kind = match kind {
            DensityKind::Uniform { lo, hi } => {
                validate_interval(lo, hi)?;
                let mean = 0.5 * (lo + hi);
                if normalize {
                    DensityKind::Uniform {
                        lo: lo / mean,
                        hi: hi / mean,
                    }
                } else {
                    check_mean(mean)?;
                    DensityKind::Uniform { lo, hi }
                }
            }
            DensityKind::BetaLike {
                lo,
                hi,
                t_minus,
                t_plus,
            } => {
                validate_interval(lo, hi)?;
                if !(-1.0 < t_minus && t_minus < 1.0 && -1.0 < t_plus && t_plus < 1.0) {
                    return Err(Error::Config(format!(
                        "edge exponents ({t_minus}, {t_plus}) must lie in (-1, 1)"
                    )));
                }
                let alpha = t_minus + 1.0;
                let beta = t_plus + 1.0;
                let mean = lo + (hi - lo) * alpha / (alpha + beta);
                if normalize {
                    DensityKind::BetaLike {
                        lo: lo / mean,
                        hi: hi / mean,
                        t_minus,
                        t_plus,
                    }
                } else {
                    check_mean(mean)?;
                    DensityKind::BetaLike {
                        lo,
                        hi,
                        t_minus,
                        t_plus,
                    }
                }
            }
            DensityKind::Table { x, rho } => {
                if x.len() < 2 || x.len() != rho.len() {
                    return Err(Error::Config(
                        "table spec needs >= 2 nodes with matching x/rho lengths".into(),
                    ));
                }
                if x[0] <= 0.0 {
                    return Err(Error::Config("table support must lie in (0, inf)".into()));
                }
                if x.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("table x nodes must be strictly ascending".into()));
                }
                if rho.iter().any(|&r| !r.is_finite() || r < 0.0) {
                    return Err(Error::Config("table densities must be finite and >= 0".into()));
                }
                let mass: f64 = trapezoid_mass(&x, &rho);
                if mass <= 0.0 {
                    return Err(Error::Config("table spec has zero mass, unnormalizable".into()));
                }
                let rho_unit: Vec<f64> = rho.iter().map(|r| r / mass).collect();
                let mean: f64 = trapezoid_first_moment(&x, &rho_unit);
                if normalize {
                    // X/mean has density mean * rho(mean * x).
                    DensityKind::Table {
                        x: x.iter().map(|v| v / mean).collect(),
                        rho: rho_unit.iter().map(|r| r * mean).collect(),
                    }
                } else {
                    check_mean(mean)?;
                    if (mass - 1.0).abs() > MEAN_TOL {
                        return Err(Error::Config(format!(
                            "table mass {mass} differs from 1 and normalization is off"
                        )));
                    }
                    DensityKind::Table { x, rho: rho_unit }
                }
            }
        };
        Ok(Self { kind })
    }

    pub fn kind(&self) -> &DensityKind {
        &self.kind
    }

    /// Support interval `(lo, hi)`.
    pub fn support(&self) -> (f64, f64) {
        match &self.kind {
            DensityKind::Uniform { lo, hi } | DensityKind::BetaLike { lo, hi, .. } => (*lo, *hi),
            DensityKind::Table { x, .. } => (x[0], *x.last().unwrap()),
        }
    }

    pub fn mean(&self) -> f64 {
        match &self.kind {
            DensityKind::Uniform { lo, hi } => 0.5 * (lo + hi),
            DensityKind::BetaLike {
                lo,
                hi,
                t_minus,
                t_plus,
            } => {
                let alpha = t_minus + 1.0;
                let beta = t_plus + 1.0;
                lo + (hi - lo) * alpha / (alpha + beta)
            }
            DensityKind::Table { x, rho } => trapezoid_first_moment(x, rho),
        }
    }

    /// Cumulative distribution function.
    pub fn cdf(&self, v: f64) -> f64 {
        let (lo, hi) = self.support();
        if v <= lo {
            return 0.0;
        }
        if v >= hi {
            return 1.0;
        }
        match &self.kind {
            DensityKind::Uniform { lo, hi } => (v - lo) / (hi - lo),
            DensityKind::BetaLike {
                lo,
                hi,
                t_minus,
                t_plus,
            } => {
                let b = Beta::new(t_minus + 1.0, t_plus + 1.0).expect("validated exponents");
                b.cdf((v - lo) / (hi - lo))
            }
            DensityKind::Table { x, rho } => {
                let i = match x.binary_search_by(|p| p.total_cmp(&v)) {
                    Ok(i) => return trapezoid_mass(&x[..=i], &rho[..=i]),
                    Err(i) => i - 1,
                };
                let head = trapezoid_mass(&x[..=i], &rho[..=i]);
                let h = x[i + 1] - x[i];
                let t = v - x[i];
                let slope = (rho[i + 1] - rho[i]) / h;
                head + rho[i] * t + 0.5 * slope * t * t
            }
        }
    }

    /// Density value at `v` (0 outside the support).
    pub fn density(&self, v: f64) -> f64 {
        let (lo, hi) = self.support();
        if v < lo || v > hi {
            return 0.0;
        }
        match &self.kind {
            DensityKind::Uniform { lo, hi } => 1.0 / (hi - lo),
            DensityKind::BetaLike {
                lo,
                hi,
                t_minus,
                t_plus,
            } => {
                let b = Beta::new(t_minus + 1.0, t_plus + 1.0).expect("validated exponents");
                b.pdf(((v - lo) / (hi - lo)).clamp(0.0, 1.0)) / (hi - lo)
            }
            DensityKind::Table { x, rho } => {
                let i = x.partition_point(|&p| p <= v).saturating_sub(1).min(x.len() - 2);
                let t = (v - x[i]) / (x[i + 1] - x[i]);
                rho[i] + (rho[i + 1] - rho[i]) * t
            }
        }
    }

    /// Quantile function (inverse CDF), `p` in `[0, 1]`.
    pub fn quantile(&self, p: f64) -> f64 {
        let (lo, hi) = self.support();
        if p <= 0.0 {
            return lo;
        }
        if p >= 1.0 {
            return hi;
        }
        match &self.kind {
            DensityKind::Uniform { lo, hi } => lo + p * (hi - lo),
            DensityKind::BetaLike {
                lo,
                hi,
                t_minus,
                t_plus,
            } => {
                let b = Beta::new(t_minus + 1.0, t_plus + 1.0).expect("validated exponents");
                lo + (hi - lo) * b.inverse_cdf(p)
            }
            DensityKind::Table { x, rho } => {
                // Walk the cells; within a cell the mass is quadratic in the
                // offset, inverted by safeguarded Newton.
                let mut head = 0.0;
                for i in 0..x.len() - 1 {
                    let h = x[i + 1] - x[i];
                    let cell = 0.5 * (rho[i] + rho[i + 1]) * h;
                    if head + cell >= p || i == x.len() - 2 {
                        let target = (p - head).clamp(0.0, cell);
                        return x[i] + invert_cell_mass(rho[i], rho[i + 1], h, target);
                    }
                    head += cell;
                }
                hi
            }
        }
    }
}

fn validate_interval(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
        return Err(Error::Config(format!(
            "support [{lo}, {hi}] must satisfy 0 < lo < hi < inf"
        )));
    }
    Ok(())
}

fn check_mean(mean: f64) -> Result<()> {
    if (mean - 1.0).abs() > MEAN_TOL {
        return Err(Error::Config(format!(
            "mean {mean} differs from 1 by more than {MEAN_TOL} and normalization is off"
        )));
    }
    Ok(())
}

fn trapezoid_mass(x: &[f64], rho: &[f64]) -> f64 {
    x.windows(2)
        .zip(rho.windows(2))
        .map(|(xs, rs)| 0.5 * (rs[0] + rs[1]) * (xs[1] - xs[0]))
        .sum()
}

fn trapezoid_first_moment(x: &[f64], rho: &[f64]) -> f64 {
    // Exact first moment of the piecewise-linear density.
    x.windows(2)
        .zip(rho.windows(2))
        .map(|(xs, rs)| {
            let (x0, x1, r0, r1) = (xs[0], xs[1], rs[0], rs[1]);
            let h = x1 - x0;
            // int_{x0}^{x1} x (r0 + (r1-r0)(x-x0)/h) dx
            h * (x0 * (2.0 * r0 + r1) + x1 * (r0 + 2.0 * r1)) / 6.0
        })
        .sum()
}

/// Solves `r0 t + (r1-r0) t^2 / (2h) = target` for `t` in `[0, h]`.
fn invert_cell_mass(r0: f64, r1: f64, h: f64, target: f64) -> f64 {
    let mass = |t: f64| r0 * t + 0.5 * (r1 - r0) * t * t / h;
    let mut lo = 0.0;
    let mut hi = h;
    let mut t = if r0 + r1 > 0.0 { 2.0 * target / (r0 + r1) } else { 0.5 * h };
    for _ in 0..100 {
        let f = mass(t) - target;
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let d = r0 + (r1 - r0) * t / h;
        let step = if d > 0.0 { t - f / d } else { 0.5 * (lo + hi) };
        t = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 * h.max(1.0) {
            break;
        }
    }
    t
}

/// Discretizes a density into `n` equal-weight atoms placed at the
/// `(j - 1/2)/n` quantiles, so the Levy distance to the spec is at most `2/n`.
pub fn discretize(spec: &DensitySpec, n: usize) -> Result<AtomicMeasure> {
    if n < 2 {
        return Err(Error::Config(format!("discretization needs n >= 2, got {n}")));
    }
    let atoms: Vec<f64> = (0..n)
        .map(|j| spec.quantile((j as f64 + 0.5) / n as f64))
        .collect();
    AtomicMeasure::new(
        atoms,
        vec![1.0 / n as f64; n],
        format!("discretized({n})"),
    )
}

/// Either side of a Levy-distance comparison.
#[derive(Clone, Copy)]
pub enum MeasureRef<'a> {
    Atomic(&'a AtomicMeasure),
    Density(&'a DensitySpec),
}

impl<'a> From<&'a AtomicMeasure> for MeasureRef<'a> {
    fn from(m: &'a AtomicMeasure) -> Self {
        MeasureRef::Atomic(m)
    }
}

impl<'a> From<&'a DensitySpec> for MeasureRef<'a> {
    fn from(m: &'a DensitySpec) -> Self {
        MeasureRef::Density(m)
    }
}

impl MeasureRef<'_> {
    /// Corners of the completed CDF graph in the rotated coordinate
    /// `u = x + F(x)`. For a step CDF these are the segment endpoints; for
    /// a continuous CDF an empty list (every `u` is handled analytically).
    fn corners(&self) -> Vec<f64> {
        match self {
            MeasureRef::Atomic(m) => {
                let mut us = Vec::with_capacity(2 * m.len());
                let mut cum = 0.0;
                for (&a, &w) in m.atoms.iter().zip(&m.weights) {
                    us.push(a + cum);
                    cum += w;
                    us.push(a + cum);
                }
                us
            }
            MeasureRef::Density(_) => Vec::new(),
        }
    }

    /// Height `v = F(x) - x` of the completed CDF graph at rotated
    /// coordinate `u = x + F(x)`; the graph meets each diagonal once, so
    /// this is well defined and 1-Lipschitz.
    fn rotated_height(&self, u: f64) -> f64 {
        match self {
            MeasureRef::Atomic(m) => {
                // Piecewise linear with slopes +-1; locate the segment.
                let mut cum = 0.0;
                for (&a, &w) in m.atoms.iter().zip(&m.weights) {
                    if u < a + cum {
                        // Horizontal stretch at height cum before this atom.
                        return 2.0 * cum - u;
                    }
                    if u <= a + cum + w {
                        // Vertical stretch at the atom.
                        return u - 2.0 * a;
                    }
                    cum += w;
                }
                2.0 * cum - u
            }
            MeasureRef::Density(spec) => {
                // Solve x + F(x) = u; x is confined to [u - 1, u].
                let mut lo = u - 1.0;
                let mut hi = u;
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if mid + spec.cdf(mid) < u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let x = 0.5 * (lo + hi);
                u - 2.0 * x
            }
        }
    }
}

/// Levy distance between two measures.
///
/// In the coordinates rotated by 45 degrees the completed CDF graphs become
/// 1-Lipschitz functions `v(u)` and the Levy distance is
/// `sup_u |v_1(u) - v_2(u)| / 2`. For step CDFs the difference is piecewise
/// linear with corners only at the graphs' segment endpoints, so scanning
/// those evaluates the distance exactly; against a continuous CDF the
/// difference is monotone between the step corners, so step corners still
/// suffice. Two continuous specs fall back to a dense scan.
pub fn levy_distance<'a, 'b>(
    m1: impl Into<MeasureRef<'a>>,
    m2: impl Into<MeasureRef<'b>>,
) -> f64 {
    let m1 = m1.into();
    let m2 = m2.into();
    let mut candidates = m1.corners();
    candidates.extend(m2.corners());
    if candidates.is_empty() {
        // Continuous vs continuous: dense scan over the joint support.
        let (lo1, hi1) = match m1 {
            MeasureRef::Density(s) => s.support(),
            MeasureRef::Atomic(_) => unreachable!(),
        };
        let (lo2, hi2) = match m2 {
            MeasureRef::Density(s) => s.support(),
            MeasureRef::Atomic(_) => unreachable!(),
        };
        let (lo, hi) = (lo1.min(lo2), hi1.max(hi2) + 1.0);
        candidates = (0..=16384)
            .map(|i| lo + (hi - lo) * i as f64 / 16384.0)
            .collect();
    }
    let mut sup: f64 = 0.0;
    for u in candidates {
        let d = (m1.rotated_height(u) - m2.rotated_height(u)).abs();
        sup = sup.max(d);
    }
    0.5 * sup
}

/// Density sampled on a grid, in mass-per-unit-length units.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridDensity {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest negative excursion that was clipped to zero.
    #[serde(default)]
    pub clip_magnitude: f64,
    /// Grid indices where the solver failed; values there are interpolated.
    #[serde(default)]
    pub failures: Vec<usize>,
}

impl GridDensity {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() || grid.len() < 2 {
            return Err(Error::Config("grid/values mismatch or too short".into()));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("grid must be strictly ascending".into()));
        }
        if values.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Config("density values must be finite and >= 0".into()));
        }
        Ok(Self {
            grid,
            values,
            clip_magnitude: 0.0,
            failures: Vec::new(),
        })
    }

    /// Trapezoid mass of the sampled density.
    pub fn integral(&self) -> f64 {
        trapezoid_mass(&self.grid, &self.values)
    }

    /// Trapezoid first moment (mean of the sampled density).
    pub fn mean(&self) -> f64 {
        trapezoid_first_moment(&self.grid, &self.values)
    }

    /// Writes the density as `x,rho` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "rho"])?;
        for (&x, &r) in self.grid.iter().zip(&self.values) {
            w.write_record([format!("{x:.17e}"), format!("{r:.17e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Quantile locations with precision metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Quantiles {
    /// `gamma[j-1]` solves `int_{gamma_j}^inf rho = j/N`; descending.
    pub locations: Vec<f64>,
    /// Set when tail mass was unresolved at the grid resolution.
    pub warning: Option<String>,
}

/// Computes the `N`-quantiles (typical locations) `gamma_1 >= ... >= gamma_N`
/// of a grid density by monotone inversion of the tail CDF. The density is
/// treated as piecewise linear, making the tail piecewise quadratic and the
/// inversion exact per cell.
pub fn quantile_locations(density: &GridDensity, n: usize) -> Result<Quantiles> {
    if n == 0 {
        return Err(Error::Config("quantile count must be positive".into()));
    }
    let g = &density.grid;
    let v = &density.values;
    let cells = g.len() - 1;
    // tail[i] = integral from grid[i] to the right end.
    let mut tail = vec![0.0; g.len()];
    for i in (0..cells).rev() {
        tail[i] = tail[i + 1] + 0.5 * (v[i] + v[i + 1]) * (g[i + 1] - g[i]);
    }
    let total = tail[0];
    let mut warning = None;
    if (total - 1.0).abs() > 5e-3 {
        warning = Some(format!(
            "grid density integrates to {total:.6}, quantiles are rescaled tail fractions"
        ));
    }
    let mut locations = Vec::with_capacity(n);
    for j in 1..=n {
        let target = total.min(j as f64 / n as f64);
        if (j as f64 / n as f64) > total + 1e-12 && warning.is_none() {
            warning = Some(format!(
                "tail mass {total:.6} cannot resolve quantile {j}/{n}; clamped to the grid"
            ));
        }
        // Find the cell where the tail crosses the target.
        let mut idx = match tail
            .binary_search_by(|t| target.partial_cmp(t).expect("finite tails"))
        {
            Ok(i) => i,
            Err(i) => i,
        };
        idx = idx.clamp(1, g.len() - 1);
        let (i0, i1) = (idx - 1, idx);
        // Inside cell [g[i0], g[i1]]: tail(x) = tail[i1] + mass from x to g[i1].
        let need = (target - tail[i1]).clamp(0.0, tail[i0] - tail[i1]);
        // Mass from g[i1]-t back to g[i1] where density is linear: integrate
        // leftwards, reusing the forward cell inversion mirrored.
        let h = g[i1] - g[i0];
        let t = invert_cell_mass(v[i1], v[i0], h, need);
        locations.push(g[i1] - t);
    }
    Ok(Quantiles { locations, warning })
}
