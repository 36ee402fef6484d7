fn main() {
    // System OpenBLAS provides both the CBLAS symbols used by ndarray's
    // `blas` feature and the LAPACK routines bound in `src/linalg.rs`.
    println!("cargo:rustc-link-lib=dylib=openblas");
}
