//! Small dense linear-algebra helpers shared by the fitting modules.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::{Error, Result};

pub const RANK_TOL: f64 = 1e-10;

/// Pivoted modified Gram–Schmidt rank check.
///
/// Returns the indices of columns that are numerically dependent on the
/// others: a column is dependent when its residual norm after projecting out
/// the already accepted columns is below `RANK_TOL` times the largest column
/// norm.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let p = x.ncols();
    let mut work: Vec<DVector<f64>> = (0..p).map(|j| x.column(j).into_owned()).collect();
    let lead = work.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if lead == 0.0 {
        return (0..p).collect();
    }
    let mut remaining: Vec<usize> = (0..p).collect();
    while !remaining.is_empty() {
        let (pos, &j) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| work[*a.1].norm().total_cmp(&work[*b.1].norm()))
            .expect("nonempty");
        let norm = work[j].norm();
        if norm <= RANK_TOL * lead {
            break;
        }
        remaining.swap_remove(pos);
        let q = &work[j] / norm;
        for &k in &remaining {
            let proj = q.dot(&work[k]);
            work[k] -= &q * proj;
        }
    }
    remaining.sort_unstable();
    remaining
}

/// Fails with a design error naming the dependent columns.
pub fn check_full_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let dep = dependent_columns(x);
    if dep.is_empty() {
        Ok(())
    } else {
        let columns: Vec<String> = dep.iter().map(|&j| names[j].clone()).collect();
        Err(Error::design(
            format!("design matrix is rank deficient; dependent columns: {}", columns.join(", ")),
            columns,
        ))
    }
}

/// Weighted least squares through a QR factorization of `sqrt(W) X`.
pub fn weighted_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    let mut xs = x.clone();
    let mut ys = y.clone();
    for i in 0..x.nrows() {
        let s = w[i].sqrt();
        xs.row_mut(i).scale_mut(s);
        ys[i] *= s;
    }
    least_squares(&xs, &ys)
}

pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("singular triangular factor in least squares".into()))
}

/// Cholesky factor of a symmetric PSD 2x2 matrix, tolerating singularity.
pub fn psd_cholesky2(psi: &Matrix2<f64>) -> Matrix2<f64> {
    let a = psi[(0, 0)].max(0.0);
    let l11 = a.sqrt();
    let (l21, l22) = if l11 > 0.0 {
        let l21 = psi[(1, 0)] / l11;
        (l21, (psi[(1, 1)] - l21 * l21).max(0.0).sqrt())
    } else {
        (0.0, psi[(1, 1)].max(0.0).sqrt())
    };
    Matrix2::new(l11, 0.0, l21, l22)
}

/// Projects a symmetric 2x2 matrix onto matrices with eigenvalues `>= floor`.
pub fn floor_eigen2(m: &Matrix2<f64>, floor: f64) -> Matrix2<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let v = eig.eigenvectors;
    v * Matrix2::from_diagonal(&vals) * v.transpose()
}

/// Log-Cholesky parameterization `(log l11, l21, log l22)` of `L L^T`.
pub fn psi_from_log_cholesky(theta: &[f64]) -> (Matrix2<f64>, Matrix2<f64>) {
    let l = Matrix2::new(theta[0].exp(), 0.0, theta[1], theta[2].exp());
    (l * l.transpose(), l)
}

pub fn log_cholesky_from_psi(psi: &Matrix2<f64>, floor: f64) -> [f64; 3] {
    let l = psd_cholesky2(&floor_eigen2(psi, floor));
    [l[(0, 0)].max(1e-300).ln(), l[(1, 0)], l[(1, 1)].max(1e-300).ln()]
}
