//! Dense linear-algebra helpers shared by the estimator and the criteria.
//!
//! Kronecker products follow the "left factor's index varies slowest"
//! convention: `kron(a, b)[i * b.len() + j] = a[i] * b[j]`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff used for pseudo-inverses and rank decisions.
pub const PINV_REL_TOL: f64 = 1e-10;

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() * b.len());
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i * b.len() + j] = ai * bj;
        }
    }
    out
}

pub fn identity(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

/// Largest asymmetry `max |a_ij - a_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..j {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in 0..j {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let mut s = a.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s).eigenvalues.min()
}

/// Eigenvalues sorted ascending.
pub fn sorted_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut s = a.clone();
    symmetrize(&mut s);
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Numerical rank with a cutoff relative to the largest absolute eigenvalue.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let ev = sorted_eigenvalues(a);
    let top = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ev.iter().filter(|v| v.abs() > rel_tol * top).count()
}

/// Cholesky with a single jitter retry of `1e-10 * mean(diag)`.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let n = a.nrows().max(1);
    let mean_diag = a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let jitter = 1e-10 * mean_diag.max(f64::MIN_POSITIVE);
    let mut b = a.clone();
    for i in 0..a.nrows() {
        b[(i, i)] += jitter;
    }
    Cholesky::new(b).ok_or_else(|| Error::IllConditioned {
        min_eigenvalue: min_eigenvalue(a),
    })
}

pub fn cholesky_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Orthonormal basis of the numerical nullspace of a symmetric PSD matrix.
#[derive(Debug, Clone)]
pub struct Nullspace {
    basis: DMatrix<f64>,
}

impl Nullspace {
    pub fn detect(a: &DMatrix<f64>, rel_tol: f64) -> Self {
        let mut s = a.clone();
        symmetrize(&mut s);
        let eig = SymmetricEigen::new(s);
        let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cut = rel_tol * top;
        let mut idx: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] <= cut)
            .collect();
        idx.sort_unstable();
        let mut basis = DMatrix::zeros(a.nrows(), idx.len());
        for (c, &i) in idx.iter().enumerate() {
            basis.set_column(c, &eig.eigenvectors.column(i));
        }
        Nullspace { basis }
    }

    pub fn empty(dim: usize) -> Self {
        Nullspace {
            basis: DMatrix::zeros(dim, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Remove the nullspace component from `v`.
    pub fn project_out(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return v.clone();
        }
        let coef = self.basis.tr_mul(v);
        v - &self.basis * coef
    }
}

/// `diag(A)^(-1/2)` with unit entries where the diagonal vanishes.
pub(crate) fn jacobi_scale(a: &DMatrix<f64>) -> DVector<f64> {
    a.diagonal().map(|d| if d > 0.0 && d.is_finite() { 1.0 / d.sqrt() } else { 1.0 })
}

pub(crate) fn scaled(a: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut b = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| s[i] * a[(i, j)] * s[j]);
    symmetrize(&mut b);
    b
}

fn orthonormal_columns(m: DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return m;
    }
    let k = m.ncols();
    m.qr().q().columns(0, k).into_owned()
}

impl Nullspace {
    /// Nullspace detected on the Jacobi-scaled matrix `SAS`, returned in the
    /// original coordinates. Blocks of very different magnitude are then
    /// judged on their own scale.
    pub fn detect_scaled(a: &DMatrix<f64>, rel_tol: f64) -> Self {
        let s = jacobi_scale(a);
        let nb = Nullspace::detect(&scaled(a, &s), rel_tol);
        let mut back = nb.basis.clone();
        for (i, mut row) in back.row_iter_mut().enumerate() {
            row *= s[i];
        }
        Nullspace {
            basis: orthonormal_columns(back),
        }
    }
}

/// Symmetric PSD solver whose known nullspace is lifted before a Cholesky
/// factorization of the Jacobi-scaled matrix, so that `solve` returns the
/// minimum-norm (pseudo-inverse) solution for right-hand sides in the range.
#[derive(Debug, Clone)]
pub struct DeflatedCholesky {
    chol: Cholesky<f64, Dyn>,
    scale: DVector<f64>,
    /// Nullspace of the scaled matrix.
    scaled_null: DMatrix<f64>,
    nullspace: Nullspace,
}

impl DeflatedCholesky {
    pub fn new(a: &DMatrix<f64>, nullspace: Nullspace) -> Option<Self> {
        let s = jacobi_scale(a);
        let mut lifted = scaled(a, &s);
        let mut sn = nullspace.basis.clone();
        for (i, mut row) in sn.row_iter_mut().enumerate() {
            row /= s[i];
        }
        let sn = orthonormal_columns(sn);
        if sn.ncols() > 0 {
            lifted.gemm(1.0, &sn, &sn.transpose(), 1.0);
        }
        symmetrize(&mut lifted);
        let chol = Cholesky::new(lifted)?;
        // reject factorizations whose pivots collapsed: the nullspace estimate is stale
        let d = chol.l_dirty().diagonal();
        let (mn, mx) = d
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        if !(mn > 0.0) || (mn / mx).powi(2) < PINV_REL_TOL * 1e-3 {
            return None;
        }
        Some(DeflatedCholesky {
            chol,
            scale: s,
            scaled_null: sn,
            nullspace,
        })
    }

    /// `A⁺ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        self.solve_matrix(&m).column(0).into_owned()
    }

    /// `A⁺ B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut sb = b.clone();
        for (i, mut row) in sb.row_iter_mut().enumerate() {
            row *= self.scale[i];
        }
        let mut y = self.chol.solve(&sb);
        if self.scaled_null.ncols() > 0 {
            let coef = self.scaled_null.tr_mul(&sb);
            y -= &self.scaled_null * coef;
        }
        for (i, mut row) in y.row_iter_mut().enumerate() {
            row *= self.scale[i];
        }
        if self.nullspace.dim() > 0 {
            let nb = self.nullspace.basis();
            let coef = nb.tr_mul(&y);
            y -= nb * coef;
        }
        y
    }

    pub fn nullity(&self) -> usize {
        self.nullspace.dim()
    }

    pub fn nullspace(&self) -> &Nullspace {
        &self.nullspace
    }
}

/// Eigendecomposition-based pseudo-inverse `A⁺` of a symmetric matrix.
pub fn pinv_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let mut s = a.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cut = rel_tol * top;
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() > cut {
            let v = eig.eigenvectors.column(k);
            out.ger(1.0 / ev, &v, &v, 1.0);
        }
    }
    out
}

/// Minimum-norm least-squares solution of `x β = y` for every column of `y`.
pub fn lstsq_min_norm(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    if x.is_empty() {
        return DMatrix::zeros(x.ncols(), y.ncols());
    }
    let svd = x.clone().svd(true, true);
    let top = svd.singular_values.max();
    let eps = (PINV_REL_TOL * top).max(f64::MIN_POSITIVE);
    svd.solve(y, eps).expect("both factors were computed")
}

/// Solve a symmetric (possibly singular) PSD system with the minimum-norm solution.
pub fn solve_psd_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, usize) {
    let null = Nullspace::detect_scaled(a, PINV_REL_TOL);
    let nullity = null.dim();
    match DeflatedCholesky::new(a, null) {
        Some(f) => (f.solve(b), nullity),
        None => (pinv_symmetric(a, PINV_REL_TOL) * b, nullity),
    }
}
