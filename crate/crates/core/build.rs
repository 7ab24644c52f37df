fn main() {
    // LAPACK/CBLAS symbols (dsyevd, zheevd, dgeqrf, ..., cblas_dgemm for
    // ndarray's `blas` feature) come from the system OpenBLAS.
    println!("cargo:rustc-link-lib=dylib=openblas");
}
