//! Dense matrix helpers: column-major vectorisation, Kronecker products and
//! symmetric positive definite solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{shape, Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative jitter added to the diagonal when a first Cholesky attempt fails.
pub const JITTER: f64 = 1e-10;

/// Stack the columns of `m` into one vector.
pub fn vec(m: &Mat) -> Vector {
    // nalgebra storage is already column-major
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(shape("unvec", (rows * cols, 1), (v.len(), 1)));
    }
    Ok(Mat::from_column_slice(rows, cols, v.as_slice()))
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// `(A ⊗ B) v` computed as `vec(B V Aᵀ)` without forming the Kronecker product.
pub fn kron_apply(a: &Mat, b: &Mat, v: &Vector) -> Result<Vector> {
    let x = unvec(v, b.ncols(), a.ncols())?;
    Ok(vec(&(b * x * a.transpose())))
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn is_symmetric(m: &Mat, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = max_abs(m).max(f64::MIN_POSITIVE);
    max_abs(&(m - m.transpose())) <= rel_tol * scale
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor of a symmetric matrix, retried once with diagonal jitter.
pub fn spd_factor(a: &Mat) -> Result<Cholesky<f64, Dyn>> {
    if !a.is_square() {
        return Err(shape("spd_factor", (a.nrows(), a.nrows()), a.shape()));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotPositiveDefinite("non-finite entries".into()));
    }
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let mean_diag = a.diagonal().mean();
    if mean_diag > 0.0 {
        let mut b = a.clone();
        let eps = JITTER * mean_diag;
        for i in 0..b.nrows() {
            b[(i, i)] += eps;
        }
        if let Some(c) = Cholesky::new(b) {
            return Ok(c);
        }
    }
    Err(Error::NotPositiveDefinite(format!(
        "{}x{} factorization failed after jitter",
        a.nrows(),
        a.ncols()
    )))
}

/// Solve `A X = B` for symmetric positive definite `A`.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.nrows() != b.nrows() {
        return Err(shape("solve_spd", (a.nrows(), b.ncols()), b.shape()));
    }
    Ok(spd_factor(a)?.solve(b))
}

pub fn inv_spd(a: &Mat) -> Result<Mat> {
    let x = spd_factor(a)?.inverse();
    Ok(symmetrize(&x))
}

pub fn log_det_spd(a: &Mat) -> Result<f64> {
    let c = spd_factor(a)?;
    Ok(2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Numerical rank using the relative singular value threshold `rel * σ_max`.
pub fn rank(m: &Mat, rel: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel * smax).count()
}

/// Columns that are linearly dependent on earlier columns.
pub fn dependent_columns(m: &Mat, rel: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    let scale = m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    for j in 0..m.ncols() {
        if m.column(j).norm() <= rel * scale || scale == 0.0 {
            bad.push(j);
            continue;
        }
        let mut cols = kept.clone();
        cols.push(j);
        if rank(&m.select_columns(&cols), rel) == cols.len() {
            kept.push(j);
        } else {
            bad.push(j);
        }
    }
    bad
}

pub fn min_eigenvalue(sym: &Mat) -> f64 {
    symmetrize(sym).symmetric_eigenvalues().min()
}

/// Symmetric positive definite matrix with a cached factorization.
#[derive(Clone, Debug)]
pub struct SpdMat {
    mat: Mat,
    chol: Cholesky<f64, Dyn>,
}

impl SpdMat {
    pub fn new(mat: Mat) -> Result<Self> {
        if !is_symmetric(&mat, 1e-10) {
            return Err(Error::NotPositiveDefinite("matrix is not symmetric".into()));
        }
        let chol = spd_factor(&mat)?;
        Ok(Self { mat, chol })
    }

    pub fn as_mat(&self) -> &Mat {
        &self.mat
    }

    pub fn into_mat(self) -> Mat {
        self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn solve(&self, b: &Mat) -> Mat {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> Mat {
        symmetrize(&self.chol.inverse())
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn cholesky_l(&self) -> Mat {
        self.chol.l()
    }
}
