//! Thin FFI shim over the system LAPACK (OpenBLAS) for the dense kernels
//! the Monte Carlo side needs: divide-and-conquer symmetric/Hermitian
//! eigensolvers, Householder QR for Haar sampling, and SVD.
//!
//! All routines take/return ndarray matrices in standard (row-major) layout;
//! the shim handles the column-major conversion, exploiting symmetry where
//! possible to avoid transposes.

use ndarray::{Array2, ShapeBuilder};
use num_complex::Complex64;
use std::os::raw::c_char;

use crate::error::{Error, Result};

extern "C" {
    fn openblas_set_num_threads(n: i32);

    fn dsyevd_(
        jobz: *const c_char, uplo: *const c_char, n: *const i32,
        a: *mut f64, lda: *const i32, w: *mut f64,
        work: *mut f64, lwork: *const i32,
        iwork: *mut i32, liwork: *const i32, info: *mut i32,
    );
    fn zheevd_(
        jobz: *const c_char, uplo: *const c_char, n: *const i32,
        a: *mut Complex64, lda: *const i32, w: *mut f64,
        work: *mut Complex64, lwork: *const i32,
        rwork: *mut f64, lrwork: *const i32,
        iwork: *mut i32, liwork: *const i32, info: *mut i32,
    );
    fn dgeqrf_(
        m: *const i32, n: *const i32, a: *mut f64, lda: *const i32,
        tau: *mut f64, work: *mut f64, lwork: *const i32, info: *mut i32,
    );
    fn dorgqr_(
        m: *const i32, n: *const i32, k: *const i32, a: *mut f64, lda: *const i32,
        tau: *const f64, work: *mut f64, lwork: *const i32, info: *mut i32,
    );
    fn zgeqrf_(
        m: *const i32, n: *const i32, a: *mut Complex64, lda: *const i32,
        tau: *mut Complex64, work: *mut Complex64, lwork: *const i32, info: *mut i32,
    );
    fn zungqr_(
        m: *const i32, n: *const i32, k: *const i32, a: *mut Complex64, lda: *const i32,
        tau: *const Complex64, work: *mut Complex64, lwork: *const i32, info: *mut i32,
    );
    fn dgesdd_(
        jobz: *const c_char, m: *const i32, n: *const i32,
        a: *mut f64, lda: *const i32, s: *mut f64,
        u: *mut f64, ldu: *const i32, vt: *mut f64, ldvt: *const i32,
        work: *mut f64, lwork: *const i32, iwork: *mut i32, info: *mut i32,
    );
    fn zgesdd_(
        jobz: *const c_char, m: *const i32, n: *const i32,
        a: *mut Complex64, lda: *const i32, s: *mut f64,
        u: *mut Complex64, ldu: *const i32, vt: *mut Complex64, ldvt: *const i32,
        work: *mut Complex64, lwork: *const i32, rwork: *mut f64,
        iwork: *mut i32, info: *mut i32,
    );
}

pub fn set_blas_threads(n: usize) {
    unsafe { openblas_set_num_threads(n.max(1) as i32) };
}

const JOBZ_V: c_char = b'V' as c_char;
const JOBZ_N: c_char = b'N' as c_char;
const UPLO_L: c_char = b'L' as c_char;
const JOBZ_A: c_char = b'A' as c_char;

fn check_info(routine: &str, info: i32) -> Result<()> {
    if info == 0 {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{routine} failed with info = {info}")))
    }
}

/// Eigendecomposition of a real symmetric matrix. Returns ascending
/// eigenvalues and, when requested, the eigenvector matrix with **row k**
/// holding the k-th eigenvector.
pub fn eigh_real(a: &Array2<f64>, vectors: bool) -> Result<(Vec<f64>, Option<Array2<f64>>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    // A symmetric row-major buffer is a valid column-major image of itself.
    let mut buf: Vec<f64> = a.iter().copied().collect();
    let ni = n as i32;
    let mut w = vec![0.0f64; n];
    let jobz = if vectors { JOBZ_V } else { JOBZ_N };
    let mut info = 0i32;
    let (mut wq, mut iwq) = (0.0f64, 0i32);
    let m1 = -1i32;
    unsafe {
        dsyevd_(&jobz, &UPLO_L, &ni, buf.as_mut_ptr(), &ni, w.as_mut_ptr(),
                &mut wq, &m1, &mut iwq, &m1, &mut info);
    }
    check_info("dsyevd (workspace)", info)?;
    let lwork = wq as i32;
    let liwork = iwq;
    let mut work = vec![0.0f64; lwork as usize];
    let mut iwork = vec![0i32; liwork as usize];
    unsafe {
        dsyevd_(&jobz, &UPLO_L, &ni, buf.as_mut_ptr(), &ni, w.as_mut_ptr(),
                work.as_mut_ptr(), &lwork, iwork.as_mut_ptr(), &liwork, &mut info);
    }
    check_info("dsyevd", info)?;
    let vecs = if vectors {
        // Column j of the column-major result is the j-th eigenvector, which
        // is row j when the same buffer is read row-major.
        Some(Array2::from_shape_vec((n, n), buf).expect("shape"))
    } else {
        None
    };
    Ok((w, vecs))
}

/// Eigendecomposition of a complex Hermitian matrix; row k of the returned
/// matrix is the k-th eigenvector. Eigenvalues ascending.
pub fn eigh_complex(
    a: &Array2<Complex64>,
    vectors: bool,
) -> Result<(Vec<f64>, Option<Array2<Complex64>>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    // Row-major Hermitian read column-major is the transpose = conjugate of
    // the matrix; its eigenvectors are the conjugates of the true ones and
    // eigenvalues are identical (real). Conjugate the output to compensate.
    let mut buf: Vec<Complex64> = a.iter().copied().collect();
    let ni = n as i32;
    let mut w = vec![0.0f64; n];
    let jobz = if vectors { JOBZ_V } else { JOBZ_N };
    let mut info = 0i32;
    let (mut wq, mut rwq, mut iwq) = (Complex64::new(0.0, 0.0), 0.0f64, 0i32);
    let m1 = -1i32;
    unsafe {
        zheevd_(&jobz, &UPLO_L, &ni, buf.as_mut_ptr(), &ni, w.as_mut_ptr(),
                &mut wq, &m1, &mut rwq, &m1, &mut iwq, &m1, &mut info);
    }
    check_info("zheevd (workspace)", info)?;
    let lwork = wq.re as i32;
    let lrwork = rwq as i32;
    let liwork = iwq;
    let mut work = vec![Complex64::new(0.0, 0.0); lwork as usize];
    let mut rwork = vec![0.0f64; lrwork as usize];
    let mut iwork = vec![0i32; liwork as usize];
    unsafe {
        zheevd_(&jobz, &UPLO_L, &ni, buf.as_mut_ptr(), &ni, w.as_mut_ptr(),
                work.as_mut_ptr(), &lwork, rwork.as_mut_ptr(), &lrwork,
                iwork.as_mut_ptr(), &liwork, &mut info);
    }
    check_info("zheevd", info)?;
    let vecs = if vectors {
        for v in buf.iter_mut() {
            *v = v.conj();
        }
        Some(Array2::from_shape_vec((n, n), buf).expect("shape"))
    } else {
        None
    };
    Ok((w, vecs))
}

/// QR factorization of a square real matrix with the Haar phase convention:
/// returns `Q` with columns scaled so the corresponding `R` diagonal is
/// positive.
pub fn qr_haar_real(g: Array2<f64>) -> Result<Array2<f64>> {
    let n = g.nrows();
    assert_eq!(n, g.ncols());
    // Treat the buffer as column-major; for an iid Gaussian fill the layout
    // is irrelevant, and we return an F-order array so the matrix is exact.
    let (mut buf, _) = g.into_raw_vec_and_offset();
    let ni = n as i32;
    let mut tau = vec![0.0f64; n];
    let mut info = 0i32;
    let m1 = -1i32;
    let mut wq = 0.0f64;
    unsafe {
        dgeqrf_(&ni, &ni, buf.as_mut_ptr(), &ni, tau.as_mut_ptr(), &mut wq, &m1, &mut info);
    }
    check_info("dgeqrf (workspace)", info)?;
    let lwork = wq as i32;
    let mut work = vec![0.0f64; lwork as usize];
    unsafe {
        dgeqrf_(&ni, &ni, buf.as_mut_ptr(), &ni, tau.as_mut_ptr(),
                work.as_mut_ptr(), &lwork, &mut info);
    }
    check_info("dgeqrf", info)?;
    let r_sign: Vec<f64> = (0..n)
        .map(|j| if buf[j + j * n] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let mut wq = 0.0f64;
    unsafe {
        dorgqr_(&ni, &ni, &ni, buf.as_mut_ptr(), &ni, tau.as_ptr(), &mut wq, &m1, &mut info);
    }
    check_info("dorgqr (workspace)", info)?;
    let lwork = wq as i32;
    let mut work = vec![0.0f64; lwork as usize];
    unsafe {
        dorgqr_(&ni, &ni, &ni, buf.as_mut_ptr(), &ni, tau.as_ptr(),
                work.as_mut_ptr(), &lwork, &mut info);
    }
    check_info("dorgqr", info)?;
    for j in 0..n {
        if r_sign[j] < 0.0 {
            for i in 0..n {
                buf[i + j * n] = -buf[i + j * n];
            }
        }
    }
    Ok(Array2::from_shape_vec((n, n).f(), buf).expect("shape"))
}

/// Complex analogue of [`qr_haar_real`] with unit-modulus phase fix.
pub fn qr_haar_complex(g: Array2<Complex64>) -> Result<Array2<Complex64>> {
    let n = g.nrows();
    assert_eq!(n, g.ncols());
    let (mut buf, _) = g.into_raw_vec_and_offset();
    let ni = n as i32;
    let mut tau = vec![Complex64::new(0.0, 0.0); n];
    let mut info = 0i32;
    let m1 = -1i32;
    let mut wq = Complex64::new(0.0, 0.0);
    unsafe {
        zgeqrf_(&ni, &ni, buf.as_mut_ptr(), &ni, tau.as_mut_ptr(), &mut wq, &m1, &mut info);
    }
    check_info("zgeqrf (workspace)", info)?;
    let lwork = wq.re as i32;
    let mut work = vec![Complex64::new(0.0, 0.0); lwork as usize];
    unsafe {
        zgeqrf_(&ni, &ni, buf.as_mut_ptr(), &ni, tau.as_mut_ptr(),
                work.as_mut_ptr(), &lwork, &mut info);
    }
    check_info("zgeqrf", info)?;
    let phases: Vec<Complex64> = (0..n)
        .map(|j| {
            let d = buf[j + j * n];
            let r = d.norm();
            if r == 0.0 { Complex64::new(1.0, 0.0) } else { (d / r).conj() }
        })
        .collect();
    let mut wq = Complex64::new(0.0, 0.0);
    unsafe {
        zungqr_(&ni, &ni, &ni, buf.as_mut_ptr(), &ni, tau.as_ptr(), &mut wq, &m1, &mut info);
    }
    check_info("zungqr (workspace)", info)?;
    let lwork = wq.re as i32;
    let mut work = vec![Complex64::new(0.0, 0.0); lwork as usize];
    unsafe {
        zungqr_(&ni, &ni, &ni, buf.as_mut_ptr(), &ni, tau.as_ptr(),
                work.as_mut_ptr(), &lwork, &mut info);
    }
    check_info("zungqr", info)?;
    for j in 0..n {
        for i in 0..n {
            buf[i + j * n] *= phases[j];
        }
    }
    Ok(Array2::from_shape_vec((n, n).f(), buf).expect("shape"))
}

/// Full SVD of a square real matrix `Y = U diag(s) V^T`. Returns
/// `(s descending, U, V)` with U, V in standard layout (columns are the
/// singular vectors).
pub fn svd_real(y: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
    let n = y.nrows();
    assert_eq!(n, y.ncols());
    // The row-major buffer read column-major is Y^T; LAPACK then factors
    // Y^T = U' S V'^T, so the true factors are U = V' and V = U'.
    let mut buf: Vec<f64> = y.iter().copied().collect();
    let ni = n as i32;
    let mut s = vec![0.0f64; n];
    let mut u = vec![0.0f64; n * n];
    let mut vt = vec![0.0f64; n * n];
    let mut iwork = vec![0i32; 8 * n];
    let mut info = 0i32;
    let m1 = -1i32;
    let mut wq = 0.0f64;
    unsafe {
        dgesdd_(&JOBZ_A, &ni, &ni, buf.as_mut_ptr(), &ni, s.as_mut_ptr(),
                u.as_mut_ptr(), &ni, vt.as_mut_ptr(), &ni,
                &mut wq, &m1, iwork.as_mut_ptr(), &mut info);
    }
    check_info("dgesdd (workspace)", info)?;
    let lwork = wq as i32;
    let mut work = vec![0.0f64; lwork as usize];
    unsafe {
        dgesdd_(&JOBZ_A, &ni, &ni, buf.as_mut_ptr(), &ni, s.as_mut_ptr(),
                u.as_mut_ptr(), &ni, vt.as_mut_ptr(), &ni,
                work.as_mut_ptr(), &lwork, iwork.as_mut_ptr(), &mut info);
    }
    check_info("dgesdd", info)?;
    // `u` holds U' = V column-major; `vt` holds V'^T column-major, whose
    // row-major reading is V' = U.
    let v = Array2::from_shape_vec((n, n).f(), u).expect("shape");
    let u_true = Array2::from_shape_vec((n, n), vt).expect("shape");
    Ok((s, u_true, v))
}

/// Full SVD of a square complex matrix `Y = U diag(s) V^*`.
pub fn svd_complex(
    y: &Array2<Complex64>,
) -> Result<(Vec<f64>, Array2<Complex64>, Array2<Complex64>)> {
    let n = y.nrows();
    assert_eq!(n, y.ncols());
    // Feed Y in true column-major to avoid conjugation subtleties.
    let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            buf[i + j * n] = y[(i, j)];
        }
    }
    let ni = n as i32;
    let mut s = vec![0.0f64; n];
    let mut u = vec![Complex64::new(0.0, 0.0); n * n];
    let mut vt = vec![Complex64::new(0.0, 0.0); n * n];
    let mut iwork = vec![0i32; 8 * n];
    let mx = n.max(1);
    let mut rwork = vec![0.0f64; (5 * mx + 7) * mx];
    let mut info = 0i32;
    let m1 = -1i32;
    let mut wq = Complex64::new(0.0, 0.0);
    unsafe {
        zgesdd_(&JOBZ_A, &ni, &ni, buf.as_mut_ptr(), &ni, s.as_mut_ptr(),
                u.as_mut_ptr(), &ni, vt.as_mut_ptr(), &ni,
                &mut wq, &m1, rwork.as_mut_ptr(), iwork.as_mut_ptr(), &mut info);
    }
    check_info("zgesdd (workspace)", info)?;
    let lwork = wq.re as i32;
    let mut work = vec![Complex64::new(0.0, 0.0); lwork as usize];
    unsafe {
        zgesdd_(&JOBZ_A, &ni, &ni, buf.as_mut_ptr(), &ni, s.as_mut_ptr(),
                u.as_mut_ptr(), &ni, vt.as_mut_ptr(), &ni,
                work.as_mut_ptr(), &lwork, rwork.as_mut_ptr(), iwork.as_mut_ptr(), &mut info);
    }
    check_info("zgesdd", info)?;
    let u_mat = Array2::from_shape_vec((n, n).f(), u).expect("shape");
    // vt is V^* in column-major; the true V has columns v_k = conj(rows of vt).
    let mut v_buf = vec![Complex64::new(0.0, 0.0); n * n];
    for k in 0..n {
        for i in 0..n {
            // (V)_{ik} = conj((V^*)_{ki}) ; (V^*)_{ki} = vt[k + i*n] col-major.
            v_buf[i + k * n] = vt[k + i * n].conj();
        }
    }
    let v_mat = Array2::from_shape_vec((n, n).f(), v_buf).expect("shape");
    Ok((s, u_mat, v_mat))
}
