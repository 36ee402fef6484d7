//! Thin wrappers over the system LAPACK (provided by OpenBLAS) for the dense
//! symmetric solves, eigendecompositions, and least-squares problems used by
//! the estimator. All public entry points take row-major `ndarray` arrays.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

// LAPACK uses 32-bit integers in the LP64 build shipped with the system
// OpenBLAS package.
#[allow(clippy::too_many_arguments)]
mod ffi {
    extern "C" {
        pub fn dpotrf_(uplo: *const u8, n: *const i32, a: *mut f64, lda: *const i32, info: *mut i32);
        pub fn dpotrs_(
            uplo: *const u8,
            n: *const i32,
            nrhs: *const i32,
            a: *const f64,
            lda: *const i32,
            b: *mut f64,
            ldb: *const i32,
            info: *mut i32,
        );
        pub fn dsyevd_(
            jobz: *const u8,
            uplo: *const u8,
            n: *const i32,
            a: *mut f64,
            lda: *const i32,
            w: *mut f64,
            work: *mut f64,
            lwork: *const i32,
            iwork: *mut i32,
            liwork: *const i32,
            info: *mut i32,
        );
        pub fn dgelsd_(
            m: *const i32,
            n: *const i32,
            nrhs: *const i32,
            a: *mut f64,
            lda: *const i32,
            b: *mut f64,
            ldb: *const i32,
            s: *mut f64,
            rcond: *const f64,
            rank: *mut i32,
            work: *mut f64,
            lwork: *const i32,
            iwork: *mut i32,
            info: *mut i32,
        );
        pub fn dgesv_(
            n: *const i32,
            nrhs: *const i32,
            a: *mut f64,
            lda: *const i32,
            ipiv: *mut i32,
            b: *mut f64,
            ldb: *const i32,
            info: *mut i32,
        );
    }
}

/// Relative condition-number ceiling beyond which a regularized system is
/// treated as numerically singular.
pub const CONDITION_LIMIT: f64 = 1e14;

fn check_finite(a: ArrayView2<'_, f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput("matrix entries".into()))
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// The factor is stored in the layout LAPACK returned it in; use the `solve_*`
/// methods rather than reading the buffer.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    factor: Array2<f64>,
    n: usize,
}

impl CholeskyFactor {
    /// Factor a symmetric matrix, rejecting inputs that are not numerically
    /// positive definite or whose diagonal-based condition estimate exceeds
    /// [`CONDITION_LIMIT`].
    pub fn new(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "cholesky requires a square matrix");
        check_finite(a.view())?;
        if n == 0 {
            return Ok(Self { factor: a.clone(), n });
        }
        // Row-major symmetric data reads identically in column-major order.
        let mut f = a.clone();
        let ni = n as i32;
        let mut info = 0i32;
        unsafe {
            ffi::dpotrf_(&b'L', &ni, f.as_slice_mut().unwrap().as_mut_ptr(), &ni, &mut info);
        }
        if info != 0 {
            return Err(Error::SingularSystem(format!(
                "cholesky failed at leading minor {info}",
            )));
        }
        let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = f[[i, i]];
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        let cond = (dmax / dmin).powi(2);
        if !cond.is_finite() || cond > CONDITION_LIMIT {
            return Err(Error::SingularSystem(format!(
                "condition estimate {cond:.3e} exceeds {CONDITION_LIMIT:.0e}",
            )));
        }
        Ok(Self { factor: f, n })
    }

    /// Solve `A x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let m = self.solve_mat(b.insert_axis(ndarray::Axis(1)))?;
        Ok(m.index_axis_move(ndarray::Axis(1), 0))
    }

    /// Solve `A X = B` where `B` is `n x k`.
    pub fn solve_mat(&self, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        assert_eq!(b.nrows(), self.n, "rhs row count mismatch");
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("solve rhs".into()));
        }
        let k = b.ncols();
        if self.n == 0 || k == 0 {
            return Ok(b.to_owned());
        }
        // LAPACK wants column-major rhs: hand it the transpose, undo after.
        let mut bt: Array2<f64> = b.t().as_standard_layout().into_owned();
        let ni = self.n as i32;
        let ki = k as i32;
        let mut info = 0i32;
        unsafe {
            ffi::dpotrs_(
                &b'L',
                &ni,
                &ki,
                self.factor.as_slice().unwrap().as_ptr(),
                &ni,
                bt.as_slice_mut().unwrap().as_mut_ptr(),
                &ni,
                &mut info,
            );
        }
        if info != 0 {
            return Err(Error::SingularSystem(format!("dpotrs returned {info}")));
        }
        Ok(bt.t().as_standard_layout().into_owned())
    }
}

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues come back ascending; row `i` of `vectors` is the unit
/// eigenvector paired with `values[i]`.
pub struct SymEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

/// Full symmetric eigendecomposition via `dsyevd`.
pub fn eigh(a: &Array2<f64>) -> Result<SymEigen> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigh requires a square matrix");
    check_finite(a.view())?;
    if n == 0 {
        return Ok(SymEigen { values: Array1::zeros(0), vectors: Array2::zeros((0, 0)) });
    }
    let mut m = a.clone();
    let mut w = Array1::<f64>::zeros(n);
    let ni = n as i32;
    let mut info = 0i32;
    // Workspace query.
    let mut work_q = [0.0f64];
    let mut iwork_q = [0i32];
    unsafe {
        ffi::dsyevd_(
            &b'V',
            &b'L',
            &ni,
            m.as_slice_mut().unwrap().as_mut_ptr(),
            &ni,
            w.as_slice_mut().unwrap().as_mut_ptr(),
            work_q.as_mut_ptr(),
            &-1,
            iwork_q.as_mut_ptr(),
            &-1,
            &mut info,
        );
    }
    let lwork = work_q[0] as i32;
    let liwork = iwork_q[0];
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    let mut iwork = vec![0i32; liwork.max(1) as usize];
    unsafe {
        ffi::dsyevd_(
            &b'V',
            &b'L',
            &ni,
            m.as_slice_mut().unwrap().as_mut_ptr(),
            &ni,
            w.as_slice_mut().unwrap().as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::SingularSystem(format!("dsyevd returned {info}")));
    }
    // Column-major eigenvector columns are rows of the row-major buffer.
    Ok(SymEigen { values: w, vectors: m })
}

/// Minimum-norm least-squares solution of `A x = b` via `dgelsd`.
pub fn lstsq_min_norm(a: &Array2<f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let (m, n) = (a.nrows(), a.ncols());
    assert_eq!(b.len(), m, "rhs length mismatch");
    check_finite(a.view())?;
    let mi = m as i32;
    let ni = n as i32;
    // Transposed copy reads as column-major `A`.
    let mut at: Array2<f64> = a.t().as_standard_layout().into_owned();
    let ldb = m.max(n).max(1);
    let mut rhs = vec![0.0f64; ldb];
    rhs[..m].copy_from_slice(b.as_slice().expect("contiguous rhs"));
    let mut s = vec![0.0f64; m.min(n).max(1)];
    let rcond = -1.0f64; // machine-precision cutoff
    let mut rank = 0i32;
    let mut info = 0i32;
    let mut work_q = [0.0f64];
    let mut iwork_q = [0i32];
    unsafe {
        ffi::dgelsd_(
            &mi,
            &ni,
            &1,
            at.as_slice_mut().unwrap().as_mut_ptr(),
            &mi.max(1),
            rhs.as_mut_ptr(),
            &(ldb as i32),
            s.as_mut_ptr(),
            &rcond,
            &mut rank,
            work_q.as_mut_ptr(),
            &-1,
            iwork_q.as_mut_ptr(),
            &mut info,
        );
    }
    let lwork = work_q[0] as i32;
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    let mut iwork = vec![0i32; iwork_q[0].max(1) as usize];
    unsafe {
        ffi::dgelsd_(
            &mi,
            &ni,
            &1,
            at.as_slice_mut().unwrap().as_mut_ptr(),
            &mi.max(1),
            rhs.as_mut_ptr(),
            &(ldb as i32),
            s.as_mut_ptr(),
            &rcond,
            &mut rank,
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::SingularSystem(format!("dgelsd returned {info}")));
    }
    Ok(Array1::from(rhs[..n].to_vec()))
}

/// Solve a general (possibly nonsymmetric) square system `A x = b`.
pub fn solve_general(a: &Array2<f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "solve_general requires a square matrix");
    assert_eq!(b.len(), n, "rhs length mismatch");
    check_finite(a.view())?;
    if n == 0 {
        return Ok(Array1::zeros(0));
    }
    let mut at: Array2<f64> = a.t().as_standard_layout().into_owned();
    let mut rhs = b.to_owned();
    let ni = n as i32;
    let mut ipiv = vec![0i32; n];
    let mut info = 0i32;
    unsafe {
        ffi::dgesv_(
            &ni,
            &1,
            at.as_slice_mut().unwrap().as_mut_ptr(),
            &ni,
            ipiv.as_mut_ptr(),
            rhs.as_slice_mut().unwrap().as_mut_ptr(),
            &ni,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::SingularSystem(format!("dgesv returned {info}")));
    }
    Ok(rhs)
}

/// Solve the symmetric PSD system `A x = b` by pseudo-inverse, dropping
/// eigendirections below `tol_rel * max_eigenvalue`. Returns the minimum-norm
/// solution among least-squares minimizers.
pub fn pinv_solve_sym(a: &Array2<f64>, b: ArrayView1<'_, f64>, tol_rel: f64) -> Result<Array1<f64>> {
    let eig = eigh(a)?;
    let lmax = eig.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let tol = lmax * tol_rel;
    let mut x = Array1::<f64>::zeros(b.len());
    for (i, &lam) in eig.values.iter().enumerate() {
        if lam.abs() > tol {
            let v = eig.vectors.row(i);
            let coef = v.dot(&b) / lam;
            x.scaled_add(coef, &v);
        }
    }
    Ok(x)
}

/// Solve a regularized normal-equation system `(A + jitter I) x = b` where
/// `A` is symmetric PSD. Jitter is `1e-10 * trace(A)` and ties between
/// minimizers are broken toward the minimum-norm solution (pseudo-inverse
/// fallback if the jittered factorization still fails).
pub fn solve_normal_equations(a: &Array2<f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    let trace: f64 = a.diag().sum();
    if !trace.is_finite() {
        return Err(Error::NonFiniteInput("normal-equation matrix".into()));
    }
    let mut aj = a.clone();
    let jitter = 1e-10 * trace;
    for i in 0..n {
        aj[[i, i]] += jitter;
    }
    match CholeskyFactor::new(&aj) {
        Ok(f) => f.solve_vec(b),
        Err(_) => pinv_solve_sym(&aj, b, 1e-12),
    }
}
