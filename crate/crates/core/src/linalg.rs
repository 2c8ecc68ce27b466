//! Small dense helpers on top of nalgebra for symmetric covariance matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn eigenvalues(a: &DMatrix<f64>) -> DVector<f64> {
    if a.nrows() == 1 {
        return DVector::from_element(1, a[(0, 0)]);
    }
    SymmetricEigen::new(a.clone()).eigenvalues
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).min()
}

/// Spectral condition number of a symmetric matrix; infinite when it is not
/// positive definite.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let ev = eigenvalues(a);
    let (lo, hi) = (ev.min(), ev.max());
    if !(lo > 0.0) || !hi.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn cholesky(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone())
}

pub fn log_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

/// Factor `L` with `L Lᵀ = a` for a symmetric PSD matrix. Uses Cholesky when
/// it succeeds and otherwise an eigendecomposition with negative eigenvalues
/// clamped at zero.
pub fn psd_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = cholesky(a) {
        return chol.l();
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Symmetrizes and lifts every eigenvalue to at least `floor`. Matrices that
/// already satisfy the floor are returned symmetrized but otherwise untouched.
pub fn floor_eigenvalues(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(a);
    if sym.nrows() == 1 {
        return DMatrix::from_element(1, 1, sym[(0, 0)].max(floor));
    }
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= floor {
        return sym;
    }
    let lifted = eig.eigenvalues.map(|v| v.max(floor));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&lifted) * eig.eigenvectors.transpose()))
}

pub fn max_abs_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}
