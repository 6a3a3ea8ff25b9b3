//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Column-major matrix in a serde-friendly shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixData {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }
}

impl From<&MatrixData> for DMatrix<f64> {
    fn from(m: &MatrixData) -> Self {
        DMatrix::from_column_slice(m.rows, m.cols, &m.data)
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Log-determinant of a symmetric positive-definite matrix via Cholesky.
pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    if m.nrows() == 0 {
        return Some(0.0);
    }
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Positive eigen-space summary of a symmetric PSD matrix: rank and the sum of
/// log positive eigenvalues.
pub fn positive_eigen_summary(m: &DMatrix<f64>, rel_tol: f64) -> (usize, f64) {
    if m.nrows() == 0 {
        return (0, 0.0);
    }
    let ev = m.clone().symmetric_eigen().eigenvalues;
    let cut = rel_tol * ev.amax();
    ev.iter()
        .filter(|&&e| e > cut)
        .fold((0, 0.0), |(r, s), &e| (r + 1, s + e.ln()))
}

pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_det_matches_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let ev = m.clone().symmetric_eigen().eigenvalues;
        let expected: f64 = ev.iter().map(|e: &f64| e.ln()).sum();
        assert!((log_det_spd(&m).unwrap() - expected).abs() < 1e-12);
        assert_eq!(positive_eigen_summary(&m, 1e-9).0, 2);
    }

    #[test]
    fn matrix_data_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back: DMatrix<f64> = (&MatrixData::from(&m)).into();
        assert_eq!(m, back);
    }
}
