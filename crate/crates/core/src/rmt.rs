//! Monte Carlo side: Haar sampling, spiked-model construction, exact
//! spectral decompositions, resolvent diagnostics against the deterministic
//! approximation, and the consistent edge estimator.
//!
//! The real-orthogonal field is the default; complex-unitary is available
//! behind [`Field::ComplexUnitary`] and treated as exploratory.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lapack;
use crate::spike::SpikeModel;
use crate::subordination::SubordinationValue;

/// Randomness field of the Haar matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Field {
    #[default]
    RealOrthogonal,
    ComplexUnitary,
}

/// Counter-based stream key: every random object is derived from
/// `(master_seed, n, trial, purpose)`, so trials are reproducible and
/// order-independent.
#[derive(Clone, Copy, Debug)]
pub struct StreamKey {
    pub master_seed: u64,
    pub n: u64,
    pub trial: u64,
    pub purpose: u64,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl StreamKey {
    pub fn new(master_seed: u64, n: usize, trial: usize, purpose: &str) -> Self {
        Self {
            master_seed,
            n: n as u64,
            trial: trial as u64,
            purpose: fnv1a64(purpose.as_bytes()),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&self.master_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&self.n.to_le_bytes());
        seed[16..24].copy_from_slice(&self.trial.to_le_bytes());
        seed[24..32].copy_from_slice(&self.purpose.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    /// Compact identifier recorded in output rows.
    pub fn seed_id(&self) -> u64 {
        let mut bytes = Vec::with_capacity(32);
        bytes.extend_from_slice(&self.master_seed.to_le_bytes());
        bytes.extend_from_slice(&self.n.to_le_bytes());
        bytes.extend_from_slice(&self.trial.to_le_bytes());
        bytes.extend_from_slice(&self.purpose.to_le_bytes());
        fnv1a64(&bytes)
    }
}

/// Dense square matrix over either field.
#[derive(Clone, Debug)]
pub enum MatrixData {
    Real(Array2<f64>),
    Complex(Array2<Complex64>),
}

impl MatrixData {
    pub fn n(&self) -> usize {
        match self {
            MatrixData::Real(m) => m.nrows(),
            MatrixData::Complex(m) => m.nrows(),
        }
    }

    pub fn as_real(&self) -> Option<&Array2<f64>> {
        match self {
            MatrixData::Real(m) => Some(m),
            MatrixData::Complex(_) => None,
        }
    }
}

/// A Haar-distributed orthogonal/unitary matrix with its unitarity defects.
#[derive(Clone, Debug)]
pub struct HaarSample {
    pub field: Field,
    pub n: usize,
    pub seed_id: u64,
    pub matrix: MatrixData,
    /// `max_ij |(U U* - I)_ij|`.
    pub unitarity_max: f64,
    /// `||U U* - I||_F`.
    pub unitarity_fro: f64,
}

/// Samples a Haar matrix by the Gaussian-QR construction with the phase of
/// the R diagonal fixed positive (the exact-Haar convention).
pub fn sample_haar(n: usize, field: Field, key: &StreamKey) -> Result<HaarSample> {
    if n < 2 {
        return Err(Error::Config(format!("Haar sampling needs N >= 2, got {n}")));
    }
    let mut rng = key.rng();
    let matrix = match field {
        Field::RealOrthogonal => {
            let mut g = Array2::<f64>::zeros((n, n));
            for v in g.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            MatrixData::Real(lapack::qr_haar_real(g)?)
        }
        Field::ComplexUnitary => {
            let mut g = Array2::<Complex64>::zeros((n, n));
            for v in g.iter_mut() {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                *v = Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
            }
            MatrixData::Complex(lapack::qr_haar_complex(g)?)
        }
    };
    let (unitarity_max, unitarity_fro) = match &matrix {
        MatrixData::Real(u) => {
            let g = u.t().dot(u);
            let mut mx: f64 = 0.0;
            let mut fr = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let d = g[(i, j)] - if i == j { 1.0 } else { 0.0 };
                    mx = mx.max(d.abs());
                    fr += d * d;
                }
            }
            (mx, fr.sqrt())
        }
        MatrixData::Complex(u) => {
            let uh = u.t().mapv(|v| v.conj());
            let g = uh.dot(u);
            let mut mx: f64 = 0.0;
            let mut fr = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let d = g[(i, j)]
                        - if i == j {
                            Complex64::new(1.0, 0.0)
                        } else {
                            Complex64::new(0.0, 0.0)
                        };
                    mx = mx.max(d.norm());
                    fr += d.norm_sqr();
                }
            }
            (mx, fr.sqrt())
        }
    };
    if unitarity_max > 1e-12 {
        return Err(Error::Numeric(format!(
            "Haar sample failed unitarity: max defect {unitarity_max:.3e}"
        )));
    }
    Ok(HaarSample {
        field,
        n,
        seed_id: key.seed_id(),
        matrix,
        unitarity_max,
        unitarity_fro,
    })
}

/// The three model matrices of one trial, all built from the same `U` and
/// symmetrized.
#[derive(Clone, Debug)]
pub struct ModelMatrices {
    /// Unspiked `A^{1/2} U B U* A^{1/2}`.
    pub q1: MatrixData,
    /// Spiked `A_hat^{1/2} U B_hat U* A_hat^{1/2}`.
    pub q1_hat: MatrixData,
    /// Spiked `B_hat^{1/2} U* A_hat U B_hat^{1/2}`.
    pub q2_hat: MatrixData,
}

fn sandwich_real(
    diag_outer: &[f64],
    diag_inner: &[f64],
    u: &Array2<f64>,
    adjoint: bool,
) -> Array2<f64> {
    // outer^{1/2} U inner U^T outer^{1/2} (or with U^T first when adjoint).
    let n = u.nrows();
    let inner = Array1::from(diag_inner.to_vec());
    let w = if adjoint {
        // U^T inner U: scale rows, then multiply.
        let mut scaled = u.to_owned();
        for (mut row, &d) in scaled.rows_mut().into_iter().zip(inner.iter()) {
            row *= d;
        }
        u.t().dot(&scaled)
    } else {
        // U inner U^T; broadcasting scales column j by inner[j].
        let scaled = u * &inner;
        scaled.dot(&u.t())
    };
    let mut out = w;
    let sqrt_outer: Vec<f64> = diag_outer.iter().map(|d| d.sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] *= sqrt_outer[i] * sqrt_outer[j];
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    out
}

fn sandwich_complex(
    diag_outer: &[f64],
    diag_inner: &[f64],
    u: &Array2<Complex64>,
    adjoint: bool,
) -> Array2<Complex64> {
    let n = u.nrows();
    let uh = u.t().mapv(|v| v.conj());
    let w = if adjoint {
        let mut scaled = u.to_owned();
        for (mut row, &d) in scaled.rows_mut().into_iter().zip(diag_inner.iter()) {
            for v in row.iter_mut() {
                *v *= d;
            }
        }
        uh.dot(&scaled)
    } else {
        let mut scaled = u.to_owned();
        for (j, &d) in diag_inner.iter().enumerate() {
            for v in scaled.column_mut(j).iter_mut() {
                *v *= d;
            }
        }
        scaled.dot(&uh)
    };
    let mut out = w;
    let sqrt_outer: Vec<f64> = diag_outer.iter().map(|d| d.sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] *= sqrt_outer[i] * sqrt_outer[j];
        }
    }
    for i in 0..n {
        for j in i..n {
            let s = 0.5 * (out[(i, j)] + out[(j, i)].conj());
            out[(i, j)] = s;
            out[(j, i)] = s.conj();
        }
    }
    out
}

/// Builds `Q1`, `Q1_hat`, `Q2_hat` from one Haar sample. The spiked and
/// unspiked matrices share the same `U`, as the sticking and interlacing
/// statements require.
pub fn build_model(model: &SpikeModel, u: &HaarSample) -> Result<ModelMatrices> {
    if u.n != model.n() {
        return Err(Error::Config(format!(
            "Haar sample is {0}x{0} but the model has N = {1}",
            u.n,
            model.n()
        )));
    }
    let (base_a, base_b) = (model.base_a(), model.base_b());
    let (hat_a, hat_b) = (model.spiked_a(), model.spiked_b());
    Ok(match &u.matrix {
        MatrixData::Real(um) => ModelMatrices {
            q1: MatrixData::Real(sandwich_real(base_a, base_b, um, false)),
            q1_hat: MatrixData::Real(sandwich_real(hat_a, hat_b, um, false)),
            q2_hat: MatrixData::Real(sandwich_real(hat_b, hat_a, um, true)),
        },
        MatrixData::Complex(um) => ModelMatrices {
            q1: MatrixData::Complex(sandwich_complex(base_a, base_b, um, false)),
            q1_hat: MatrixData::Complex(sandwich_complex(hat_a, hat_b, um, false)),
            q2_hat: MatrixData::Complex(sandwich_complex(hat_b, hat_a, um, true)),
        },
    })
}

/// Eigenvectors over either field; row `k` is the eigenvector of the `k`-th
/// largest eigenvalue.
#[derive(Clone, Debug)]
pub enum EigenVectors {
    Real(Array2<f64>),
    Complex(Array2<Complex64>),
}

/// Full spectral decomposition with eigenvalues descending.
#[derive(Clone, Debug)]
pub struct SpectralData {
    pub eigenvalues: Vec<f64>,
    pub vectors: EigenVectors,
    /// Max relative residual `||M u_k - l_k u_k|| / ||M||` over the checked
    /// eigenpairs (the leading block the statistics consume).
    pub max_residual: f64,
    /// Max deviation of the checked Gram block from the identity.
    pub orthonormality_error: f64,
}

/// Number of leading eigenpairs whose residuals are verified per
/// decomposition.
const RESIDUAL_CHECK_COUNT: usize = 64;

/// Full eigendecomposition of a Hermitian matrix, descending order, with
/// residual and orthonormality checks on the leading block.
pub fn spectral_decomposition(m: &MatrixData) -> Result<SpectralData> {
    let n = m.n();
    let k = RESIDUAL_CHECK_COUNT.min(n);
    match m {
        MatrixData::Real(a) => {
            let (mut w, vecs) = lapack::eigh_real(a, true)?;
            let mut v = vecs.expect("vectors requested");
            w.reverse();
            reverse_rows_real(&mut v);
            let norm = w.iter().fold(0.0f64, |acc, &x| acc.max(x.abs())).max(1e-300);
            let mut max_res: f64 = 0.0;
            for kk in 0..k {
                let x = v.row(kk);
                let ax = a.dot(&x);
                let mut r2 = 0.0;
                for i in 0..n {
                    let d = ax[i] - w[kk] * x[i];
                    r2 += d * d;
                }
                max_res = max_res.max(r2.sqrt() / norm);
            }
            let top = v.slice(ndarray::s![0..k, ..]);
            let gram = top.dot(&top.t());
            let mut orth: f64 = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let d = gram[(i, j)] - if i == j { 1.0 } else { 0.0 };
                    orth = orth.max(d.abs());
                }
            }
            check_decomposition(max_res, orth)?;
            Ok(SpectralData {
                eigenvalues: w,
                vectors: EigenVectors::Real(v),
                max_residual: max_res,
                orthonormality_error: orth,
            })
        }
        MatrixData::Complex(a) => {
            let (mut w, vecs) = lapack::eigh_complex(a, true)?;
            let mut v = vecs.expect("vectors requested");
            w.reverse();
            reverse_rows_complex(&mut v);
            let norm = w.iter().fold(0.0f64, |acc, &x| acc.max(x.abs())).max(1e-300);
            let mut max_res: f64 = 0.0;
            for kk in 0..k {
                let x = v.row(kk);
                let ax = a.dot(&x);
                let mut r2 = 0.0;
                for i in 0..n {
                    let d = ax[i] - w[kk] * x[i];
                    r2 += d.norm_sqr();
                }
                max_res = max_res.max(r2.sqrt() / norm);
            }
            let top = v.slice(ndarray::s![0..k, ..]);
            let gram = top.mapv(|x| x.conj()).dot(&top.t());
            let mut orth: f64 = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let d = gram[(i, j)]
                        - if i == j {
                            Complex64::new(1.0, 0.0)
                        } else {
                            Complex64::new(0.0, 0.0)
                        };
                    orth = orth.max(d.norm());
                }
            }
            check_decomposition(max_res, orth)?;
            Ok(SpectralData {
                eigenvalues: w,
                vectors: EigenVectors::Complex(v),
                max_residual: max_res,
                orthonormality_error: orth,
            })
        }
    }
}

fn check_decomposition(max_res: f64, orth: f64) -> Result<()> {
    if max_res > 1e-9 {
        return Err(Error::Numeric(format!(
            "eigen-residual {max_res:.3e} exceeds 1e-9 of the matrix norm"
        )));
    }
    if orth > 1e-10 {
        return Err(Error::Numeric(format!(
            "eigenvector orthonormality defect {orth:.3e} exceeds 1e-10"
        )));
    }
    Ok(())
}

fn reverse_rows_real(v: &mut Array2<f64>) {
    let n = v.nrows();
    for i in 0..n / 2 {
        for j in 0..v.ncols() {
            v.swap((i, j), (n - 1 - i, j));
        }
    }
}

fn reverse_rows_complex(v: &mut Array2<Complex64>) {
    let n = v.nrows();
    for i in 0..n / 2 {
        for j in 0..v.ncols() {
            let t = v[(i, j)];
            v[(i, j)] = v[(n - 1 - i, j)];
            v[(n - 1 - i, j)] = t;
        }
    }
}

/// Eigenvalues only (descending), at a fraction of the cost of the full
/// decomposition.
pub fn eigenvalues_only(m: &MatrixData) -> Result<Vec<f64>> {
    let mut w = match m {
        MatrixData::Real(a) => lapack::eigh_real(a, false)?.0,
        MatrixData::Complex(a) => lapack::eigh_complex(a, false)?.0,
    };
    w.reverse();
    Ok(w)
}

/// Squared projection of `v` onto the span of the eigenvectors indexed by
/// `s`: `sum_{k in s} |<u_k, v>|^2`.
pub fn empirical_overlap(spec: &SpectralData, s: &[usize], v: &[f64]) -> Result<f64> {
    let n = spec.eigenvalues.len();
    if v.len() != n {
        return Err(Error::Config("direction length mismatch".into()));
    }
    if let Some(&bad) = s.iter().find(|&&k| k >= n) {
        return Err(Error::Config(format!("eigenvector index {bad} out of range")));
    }
    let mut acc = 0.0;
    match &spec.vectors {
        EigenVectors::Real(mat) => {
            for &k in s {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += mat[(k, i)] * v[i];
                }
                acc += dot * dot;
            }
        }
        EigenVectors::Complex(mat) => {
            for &k in s {
                let mut dot = Complex64::new(0.0, 0.0);
                for i in 0..n {
                    dot += mat[(k, i)].conj() * v[i];
                }
                acc += dot.norm_sqr();
            }
        }
    }
    Ok(acc)
}

/// The deterministic resolvent approximation: the `2N` diagonal entries
/// `Theta_ii = Omega_B(z) / (z (a_i - Omega_B(z)))` for `i < N` and
/// `Theta_mm = Omega_A(z) / (z (b_m - Omega_A(z)))` for the second block.
pub fn theta_matrix(
    diag_a: &[f64],
    diag_b: &[f64],
    sub: &SubordinationValue,
) -> Result<Vec<Complex64>> {
    let z = sub.z;
    let mut out = Vec::with_capacity(diag_a.len() + diag_b.len());
    for (i, &a) in diag_a.iter().enumerate() {
        let d = Complex64::new(a, 0.0) - sub.omega_b;
        if d.norm() <= 1e-12 {
            return Err(Error::Singular(format!(
                "Theta entry {i}: a_i = {a} within 1e-12 of Omega_B = {}",
                sub.omega_b
            )));
        }
        out.push(sub.omega_b / (z * d));
    }
    for (j, &b) in diag_b.iter().enumerate() {
        let d = Complex64::new(b, 0.0) - sub.omega_a;
        if d.norm() <= 1e-12 {
            return Err(Error::Singular(format!(
                "Theta entry N+{j}: b_j = {b} within 1e-12 of Omega_A = {}",
                sub.omega_a
            )));
        }
        out.push(sub.omega_a / (z * d));
    }
    Ok(out)
}

/// SVD data of `Y = A^{1/2} U B^{1/2}`: eigenvalues of `Q1 = Y Y*`
/// (descending), singular values, and singular-vector matrices with
/// **columns** `u_k`, `v_k`.
#[derive(Clone, Debug)]
pub struct SvdData {
    pub lambda: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub u: MatrixData,
    pub v: MatrixData,
}

/// Builds and SVDs `Y = diag_a^{1/2} U diag_b^{1/2}`.
pub fn svd_of_y(diag_a: &[f64], diag_b: &[f64], u: &HaarSample) -> Result<SvdData> {
    let n = u.n;
    if diag_a.len() != n || diag_b.len() != n {
        return Err(Error::Config("diagonal length mismatch".into()));
    }
    let sa: Vec<f64> = diag_a.iter().map(|d| d.sqrt()).collect();
    let sb: Vec<f64> = diag_b.iter().map(|d| d.sqrt()).collect();
    match &u.matrix {
        MatrixData::Real(um) => {
            let mut y = um.to_owned();
            for i in 0..n {
                for j in 0..n {
                    y[(i, j)] *= sa[i] * sb[j];
                }
            }
            let (s, u_mat, v_mat) = lapack::svd_real(&y)?;
            Ok(SvdData {
                lambda: s.iter().map(|x| x * x).collect(),
                singular_values: s,
                u: MatrixData::Real(u_mat),
                v: MatrixData::Real(v_mat),
            })
        }
        MatrixData::Complex(um) => {
            let mut y = um.to_owned();
            for i in 0..n {
                for j in 0..n {
                    y[(i, j)] *= sa[i] * sb[j];
                }
            }
            let (s, u_mat, v_mat) = lapack::svd_complex(&y)?;
            Ok(SvdData {
                lambda: s.iter().map(|x| x * x).collect(),
                singular_values: s,
                u: MatrixData::Complex(u_mat),
                v: MatrixData::Complex(v_mat),
            })
        }
    }
}

/// Spectral-domain tag for local-law evaluation points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainTag {
    /// Near/inside the spectrum at heights above `eta_L = N^{-1+xi}`.
    EdgeBulk,
    /// To the right of `E_+ + N^{-2/3+tau}`, any small height.
    Outside,
}

/// Parameters fixing the spectral domains.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DomainParams {
    pub tau: f64,
    pub xi: f64,
    pub eta_u: f64,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            xi: 0.1,
            eta_u: 10.0,
        }
    }
}

/// Classifies `z` into one of the spectral domains.
pub fn classify_domain(z: Complex64, e_plus: f64, n: usize, p: &DomainParams) -> Result<DomainTag> {
    let nf = n as f64;
    let eta_l = nf.powf(-1.0 + p.xi);
    let (e, eta) = (z.re, z.im);
    if e >= e_plus - p.tau && e <= 1.0 / p.tau && eta > eta_l && eta < p.eta_u {
        return Ok(DomainTag::EdgeBulk);
    }
    if e >= e_plus + nf.powf(-2.0 / 3.0 + p.tau) && e <= 1.0 / p.tau && eta.abs() < p.eta_u {
        return Ok(DomainTag::Outside);
    }
    Err(Error::Domain(format!(
        "z = {z} lies in neither spectral domain (E_+ = {e_plus}, eta_L = {eta_l:.3e})"
    )))
}

/// Local-law diagnostics at one spectral parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolventDiagnostics {
    pub z: Complex64,
    /// `sup_kl |(G - Theta)_kl|` over the full 2N x 2N linearization.
    pub sup_entry_error: f64,
    /// Same restricted to the two diagonal blocks.
    pub sup_diagonal_error: f64,
    /// Largest off-diagonal-block entry (Theta is zero there).
    pub sup_offdiagonal_error: f64,
    /// `|m_H(z) - m_{mu_A x mu_B}(z)|`.
    pub averaged_error: f64,
    /// `kappa = |Re z - E_+|`.
    pub kappa: f64,
    pub domain: DomainTag,
}

/// Builds the linearization resolvent `G(z)` exactly from the SVD of `Y`
/// and measures its entrywise and averaged deviation from `Theta(z)`.
///
/// `m_target` is the Stieltjes transform of the convolution at `z` (from
/// the subordination solver). The principal branch is used for `z^{1/2}`.
#[allow(clippy::too_many_arguments)]
pub fn local_law_residual(
    diag_a: &[f64],
    diag_b: &[f64],
    svd: &SvdData,
    z: Complex64,
    sub: &SubordinationValue,
    m_target: Complex64,
    e_plus: f64,
    params: &DomainParams,
) -> Result<ResolventDiagnostics> {
    let n = svd.lambda.len();
    let domain = classify_domain(z, e_plus, n, params)?;
    let theta = theta_matrix(diag_a, diag_b, sub)?;

    let f: Vec<Complex64> = svd
        .lambda
        .iter()
        .map(|&l| (Complex64::new(l, 0.0) - z).inv())
        .collect();
    let zsqrt_inv = z.sqrt().inv();
    let sf: Vec<Complex64> = svd
        .singular_values
        .iter()
        .zip(&f)
        .map(|(&s, &fk)| zsqrt_inv * s * fk)
        .collect();

    let (g11, g22, g12) = match (&svd.u, &svd.v) {
        (MatrixData::Real(u), MatrixData::Real(v)) => (
            herm_combination_real(u, &f),
            herm_combination_real(v, &f),
            cross_combination_real(u, v, &sf),
        ),
        (MatrixData::Complex(u), MatrixData::Complex(v)) => (
            herm_combination_complex(u, &f),
            herm_combination_complex(v, &f),
            cross_combination_complex(u, v, &sf),
        ),
        _ => return Err(Error::Config("mixed-field SVD data".into())),
    };

    let mut sup_diag: f64 = 0.0;
    let zero = Complex64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let t11 = if i == j { theta[i] } else { zero };
            let t22 = if i == j { theta[n + i] } else { zero };
            sup_diag = sup_diag.max((g11[(i, j)] - t11).norm());
            sup_diag = sup_diag.max((g22[(i, j)] - t22).norm());
        }
    }
    let mut sup_off: f64 = 0.0;
    for v in g12.iter() {
        sup_off = sup_off.max(v.norm());
    }
    let sup_entry = sup_diag.max(sup_off);

    // Averaged law from the eigenvalues directly.
    let m_h = f.iter().sum::<Complex64>() / n as f64;
    let averaged = (m_h - m_target).norm();

    Ok(ResolventDiagnostics {
        z,
        sup_entry_error: sup_entry,
        sup_diagonal_error: sup_diag,
        sup_offdiagonal_error: sup_off,
        averaged_error: averaged,
        kappa: (z.re - e_plus).abs(),
        domain,
    })
}

/// `W diag(c) W^T` for a real matrix with orthonormal columns and complex
/// coefficients, via two real GEMMs.
fn herm_combination_real(w: &Array2<f64>, c: &[Complex64]) -> Array2<Complex64> {
    let re: Array1<f64> = c.iter().map(|v| v.re).collect();
    let im: Array1<f64> = c.iter().map(|v| v.im).collect();
    let mre = (w * &re).dot(&w.t());
    let mim = (w * &im).dot(&w.t());
    let mut out = Array2::<Complex64>::zeros(mre.dim());
    for (o, (&a, &b)) in out.iter_mut().zip(mre.iter().zip(mim.iter())) {
        *o = Complex64::new(a, b);
    }
    out
}

fn cross_combination_real(u: &Array2<f64>, v: &Array2<f64>, c: &[Complex64]) -> Array2<Complex64> {
    let re: Array1<f64> = c.iter().map(|x| x.re).collect();
    let im: Array1<f64> = c.iter().map(|x| x.im).collect();
    let mre = (u * &re).dot(&v.t());
    let mim = (u * &im).dot(&v.t());
    let mut out = Array2::<Complex64>::zeros(mre.dim());
    for (o, (&a, &b)) in out.iter_mut().zip(mre.iter().zip(mim.iter())) {
        *o = Complex64::new(a, b);
    }
    out
}

fn herm_combination_complex(w: &Array2<Complex64>, c: &[Complex64]) -> Array2<Complex64> {
    let mut scaled = w.to_owned();
    for (j, &cj) in c.iter().enumerate() {
        for v in scaled.column_mut(j).iter_mut() {
            *v *= cj;
        }
    }
    scaled.dot(&w.t().mapv(|v| v.conj()))
}

fn cross_combination_complex(
    u: &Array2<Complex64>,
    v: &Array2<Complex64>,
    c: &[Complex64],
) -> Array2<Complex64> {
    let mut scaled = u.to_owned();
    for (j, &cj) in c.iter().enumerate() {
        for val in scaled.column_mut(j).iter_mut() {
            *val *= cj;
        }
    }
    scaled.dot(&v.t().mapv(|x| x.conj()))
}

/// The `(r+s) x (r+s)` block `U* G(x) U` of the unspiked linearization
/// resolvent at a real `x` outside the spectrum, where the selection picks
/// the first `r` coordinates of the upper block and the first `s` of the
/// lower. Feeds the finite-N master equation.
pub fn u_g_u_block(svd: &SvdData, r: usize, s: usize, x: f64) -> Result<Array2<f64>> {
    let n = svd.lambda.len();
    if r > n || s > n {
        return Err(Error::Config("spike counts exceed N".into()));
    }
    if x <= 0.0 {
        return Err(Error::Domain("master equation block needs x > 0".into()));
    }
    let nearest = svd
        .lambda
        .iter()
        .map(|&l| (l - x).abs())
        .fold(f64::INFINITY, f64::min);
    if nearest <= 1e-12 * (1.0 + x.abs()) {
        return Err(Error::Domain(format!(
            "x = {x} coincides with an eigenvalue of the unspiked model"
        )));
    }
    let u = svd.u.as_real().ok_or_else(|| {
        Error::Config("finite-N master equation is wired for the real field".into())
    })?;
    let v = svd.v.as_real().expect("fields match");
    let f: Vec<f64> = svd.lambda.iter().map(|&l| 1.0 / (l - x)).collect();
    let xs = x.sqrt();
    let k = r + s;
    let mut out = Array2::<f64>::zeros((k, k));
    for i in 0..r {
        for j in 0..r {
            let mut acc = 0.0;
            for kk in 0..n {
                acc += u[(i, kk)] * u[(j, kk)] * f[kk];
            }
            out[(i, j)] = acc;
        }
    }
    for p in 0..s {
        for q in 0..s {
            let mut acc = 0.0;
            for kk in 0..n {
                acc += v[(p, kk)] * v[(q, kk)] * f[kk];
            }
            out[(r + p, r + q)] = acc;
        }
    }
    for i in 0..r {
        for p in 0..s {
            let mut acc = 0.0;
            for kk in 0..n {
                acc += svd.singular_values[kk] * f[kk] * u[(i, kk)] * v[(p, kk)];
            }
            out[(i, r + p)] = acc / xs;
            out[(r + p, i)] = acc / xs;
        }
    }
    Ok(out)
}

/// Consistent estimator of `Omega_beta(E_+)` from the unspiked spectrum:
/// `Omega_B^c(z_hat) = z_hat tr(A G~(z_hat)) / (1 + z_hat tr G~(z_hat))`
/// at `z_hat = lambda_1 + i N^{-2/3+epsilon}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OmegaEdgeEstimate {
    pub z_hat: Complex64,
    pub value: Complex64,
}

pub fn estimate_omega_beta_edge(
    spec: &SpectralData,
    diag_a: &[f64],
    epsilon: f64,
) -> Result<OmegaEdgeEstimate> {
    if !(0.0 < epsilon && epsilon < 1.0 / 3.0) {
        return Err(Error::Config(format!("epsilon = {epsilon} outside (0, 1/3)")));
    }
    let n = spec.eigenvalues.len();
    if diag_a.len() != n {
        return Err(Error::Config("diagonal length mismatch".into()));
    }
    let nf = n as f64;
    let z_hat = Complex64::new(spec.eigenvalues[0], nf.powf(-2.0 / 3.0 + epsilon));
    let mut tr_g = Complex64::new(0.0, 0.0);
    let mut tr_ag = Complex64::new(0.0, 0.0);
    match &spec.vectors {
        EigenVectors::Real(mat) => {
            for k in 0..n {
                let fk = (Complex64::new(spec.eigenvalues[k], 0.0) - z_hat).inv();
                let mut a_quad = 0.0;
                for i in 0..n {
                    a_quad += diag_a[i] * mat[(k, i)] * mat[(k, i)];
                }
                tr_g += fk;
                tr_ag += fk * a_quad;
            }
        }
        EigenVectors::Complex(mat) => {
            for k in 0..n {
                let fk = (Complex64::new(spec.eigenvalues[k], 0.0) - z_hat).inv();
                let mut a_quad = 0.0;
                for i in 0..n {
                    a_quad += diag_a[i] * mat[(k, i)].norm_sqr();
                }
                tr_g += fk;
                tr_ag += fk * a_quad;
            }
        }
    }
    tr_g /= nf;
    tr_ag /= nf;
    let denom = Complex64::new(1.0, 0.0) + z_hat * tr_g;
    if denom.norm() <= 1e-14 {
        return Err(Error::Pole("estimator denominator vanished".into()));
    }
    Ok(OmegaEdgeEstimate {
        z_hat,
        value: z_hat * tr_ag / denom,
    })
}

/// Same estimator driven by SVD data of the unspiked `Y` (the left
/// singular vectors are the eigenvectors of `Q1`).
pub fn estimate_omega_beta_edge_from_svd(
    svd: &SvdData,
    diag_a: &[f64],
    epsilon: f64,
) -> Result<OmegaEdgeEstimate> {
    if !(0.0 < epsilon && epsilon < 1.0 / 3.0) {
        return Err(Error::Config(format!("epsilon = {epsilon} outside (0, 1/3)")));
    }
    let n = svd.lambda.len();
    if diag_a.len() != n {
        return Err(Error::Config("diagonal length mismatch".into()));
    }
    let nf = n as f64;
    let z_hat = Complex64::new(svd.lambda[0], nf.powf(-2.0 / 3.0 + epsilon));
    let mut tr_g = Complex64::new(0.0, 0.0);
    let mut tr_ag = Complex64::new(0.0, 0.0);
    match &svd.u {
        MatrixData::Real(mat) => {
            for k in 0..n {
                let fk = (Complex64::new(svd.lambda[k], 0.0) - z_hat).inv();
                let mut a_quad = 0.0;
                for i in 0..n {
                    a_quad += diag_a[i] * mat[(i, k)] * mat[(i, k)];
                }
                tr_g += fk;
                tr_ag += fk * a_quad;
            }
        }
        MatrixData::Complex(mat) => {
            for k in 0..n {
                let fk = (Complex64::new(svd.lambda[k], 0.0) - z_hat).inv();
                let mut a_quad = 0.0;
                for i in 0..n {
                    a_quad += diag_a[i] * mat[(i, k)].norm_sqr();
                }
                tr_g += fk;
                tr_ag += fk * a_quad;
            }
        }
    }
    tr_g /= nf;
    tr_ag /= nf;
    let denom = Complex64::new(1.0, 0.0) + z_hat * tr_g;
    if denom.norm() <= 1e-14 {
        return Err(Error::Pole("estimator denominator vanished".into()));
    }
    Ok(OmegaEdgeEstimate {
        z_hat,
        value: z_hat * tr_ag / denom,
    })
}

/// One row of the rigidity report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RigidityRow {
    /// 1-based rank from the top.
    pub rank: usize,
    pub lambda: f64,
    pub gamma_star: f64,
    pub deviation: f64,
    /// `|lambda_i - gamma_i| i^{1/3} N^{2/3}`.
    pub normalized: f64,
}

/// Deviations of the eigenvalues from the quantiles of the convolution, for
/// ranks up to `N/3`.
pub fn rigidity_report(eigenvalues: &[f64], gamma_star: &[f64]) -> Vec<RigidityRow> {
    let n = eigenvalues.len();
    let nf = n as f64;
    let top = n / 3;
    (0..top.min(gamma_star.len()))
        .map(|i| {
            let dev = (eigenvalues[i] - gamma_star[i]).abs();
            RigidityRow {
                rank: i + 1,
                lambda: eigenvalues[i],
                gamma_star: gamma_star[i],
                deviation: dev,
                normalized: dev * ((i + 1) as f64).powf(1.0 / 3.0) * nf.powf(2.0 / 3.0),
            }
        })
        .collect()
}

/// Delocalization statistics `N max_i |u_k(i)|^2` for `k <= N/3`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DelocalizationReport {
    pub stats: Vec<f64>,
    /// Set when the spectrum is (numerically) fully degenerate and the
    /// eigenbasis is arbitrary.
    pub degenerate: bool,
}

pub fn delocalization_report(spec: &SpectralData) -> DelocalizationReport {
    let n = spec.eigenvalues.len();
    let spread = spec.eigenvalues[0] - spec.eigenvalues[n - 1];
    let degenerate = spread <= 1e-9 * (1.0 + spec.eigenvalues[0].abs());
    let top = n / 3;
    let nf = n as f64;
    let stats = (0..top)
        .map(|k| {
            let mx = match &spec.vectors {
                EigenVectors::Real(mat) => {
                    mat.row(k).iter().fold(0.0f64, |acc, &x| acc.max(x * x))
                }
                EigenVectors::Complex(mat) => mat
                    .row(k)
                    .iter()
                    .fold(0.0f64, |acc, x| acc.max(x.norm_sqr())),
            };
            nf * mx
        })
        .collect();
    DelocalizationReport { stats, degenerate }
}

/// Counts violations of the interlacing `lambda_hat_i in [lambda_i,
/// lambda_{i-rank}]` (descending, with `lambda_{i<0} = +inf`), allowing an
/// eigensolver slack proportional to the spectral norm.
pub fn interlacing_violations(
    spiked: &[f64],
    unspiked: &[f64],
    rank: usize,
    slack_rel: f64,
) -> usize {
    let n = spiked.len().min(unspiked.len());
    let scale = unspiked
        .first()
        .copied()
        .unwrap_or(1.0)
        .abs()
        .max(spiked.first().copied().unwrap_or(1.0).abs());
    let slack = slack_rel * (1.0 + scale);
    let mut violations = 0;
    for i in 0..n {
        if spiked[i] < unspiked[i] - slack {
            violations += 1;
            continue;
        }
        if i >= rank && spiked[i] > unspiked[i - rank] + slack {
            violations += 1;
        }
    }
    violations
}
