//! Thin helpers over `nalgebra` for the probe fits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Column means and scales of a design matrix. Columns whose spread is
/// negligible get scale `0`, which standardizes them to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScaler {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl ColumnScaler {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let cols = x.ncols();
        let mut mean = DVector::zeros(cols);
        let mut scale = DVector::zeros(cols);
        for c in 0..cols {
            let col = x.column(c);
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let mag = col.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            mean[c] = m;
            scale[c] = if var.sqrt() > 1e-12 * mag.max(1e-300) && var > 0.0 {
                1.0 / var.sqrt()
            } else {
                0.0
            };
        }
        Self { mean, scale }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x.clone();
        for c in 0..z.ncols() {
            let (m, s) = (self.mean[c], self.scale[c]);
            z.column_mut(c).apply(|v| *v = (*v - m) * s);
        }
        z
    }

    /// Number of columns that carry variance.
    pub fn active(&self) -> usize {
        self.scale.iter().filter(|s| **s > 0.0).count()
    }
}

/// `C^{-1/2}` for a symmetric positive semi-definite matrix; eigenvalues at
/// or below `floor` map to zero.
pub fn inv_sqrt_sym(c: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(c.clone());
    let d = eig
        .eigenvalues
        .map(|l| if l > floor { 1.0 / l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Moore–Penrose solve `G⁺·rhs` for symmetric `G`, cutting eigenvalues
/// below `rcond · λ_max`.
pub fn pinv_solve_sym(g: &DMatrix<f64>, rhs: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(g.clone());
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, l| a.max(*l));
    let inv = eig.eigenvalues.map(|l| if l > rcond * top && l > 0.0 { 1.0 / l } else { 0.0 });
    let vt_rhs = eig.eigenvectors.transpose() * rhs;
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * vt_rhs
}

/// Rows of `x` selected by `idx`.
pub fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)])
}

pub fn select(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}
