//! Canonical correlation analysis between two views over the same samples.

use nalgebra::{DMatrix, SymmetricEigen};

use super::RepresentationMatrix;
use crate::error::{Error, Result};

/// Relative eigenvalue floor for the covariance inverse square roots.
pub const RIDGE_SCALE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct CcaResult {
    /// Canonical correlations, descending, `min(a, b)` of them.
    pub rho: Vec<f64>,
}

impl CcaResult {
    pub fn mean(&self) -> f64 {
        self.rho.iter().sum::<f64>() / self.rho.len() as f64
    }
}

fn centered(r: &RepresentationMatrix) -> DMatrix<f64> {
    let mut m = DMatrix::from_row_slice(r.rows, r.cols, &r.data);
    for mut row in m.row_iter_mut() {
        let mean = row.sum() / row.len() as f64;
        row.add_scalar_mut(-mean);
    }
    m
}

/// `Σ^{-1/2}` with eigenvalues floored at `1e-8 · trace / dim`. Returns
/// `None` when the view has no variance at all.
fn inv_sqrt(cov: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let dim = cov.nrows();
    let floor = RIDGE_SCALE * cov.trace() / dim as f64;
    if floor.is_nan() || floor <= 0.0 {
        return None;
    }
    let eig = SymmetricEigen::new(cov);
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    let v = &eig.eigenvectors;
    Some(v * DMatrix::from_diagonal(&d) * v.transpose())
}

/// Canonical correlations of `r1` (a×n) and `r2` (b×n).
///
/// Rows are mean-centered; ρ are the singular values of
/// `Σ11^{-1/2} Σ12 Σ22^{-1/2}`. Eigenvalues of `Σ11`, `Σ22` below
/// `1e-8 · trace/dim` are raised to that floor, so rank-deficient views (dead
/// channels) give ρ = 0 along their null directions instead of blowing up.
pub fn cca_coefficients(r1: &RepresentationMatrix, r2: &RepresentationMatrix) -> Result<CcaResult> {
    if r1.cols != r2.cols {
        return Err(Error::shape(
            "cca",
            format!("views have {} and {} samples", r1.cols, r2.cols),
        ));
    }
    let n = r1.cols;
    if n <= r1.rows.max(r2.rows) {
        return Err(Error::InvalidArgument(format!(
            "cca needs more samples ({n}) than dimensions ({} and {})",
            r1.rows, r2.rows
        )));
    }
    if !r1.data.iter().chain(&r2.data).all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("cca input contains non-finite values".into()));
    }
    let k = r1.rows.min(r2.rows);
    let x = centered(r1);
    let y = centered(r2);
    let scale = 1.0 / (n as f64 - 1.0);
    let s11 = (&x * x.transpose()) * scale;
    let s22 = (&y * y.transpose()) * scale;
    let s12 = (&x * y.transpose()) * scale;
    let (Some(w1), Some(w2)) = (inv_sqrt(s11), inv_sqrt(s22)) else {
        return Ok(CcaResult { rho: vec![0.0; k] });
    };
    let m = w1 * s12 * w2;
    let mut rho: Vec<f64> = m.singular_values().iter().copied().collect();
    rho.sort_by(|a, b| b.total_cmp(a));
    rho.truncate(k);
    Ok(CcaResult { rho })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> RepresentationMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RepresentationMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn self_similarity_and_scale() {
        let r = random(6, 200, 1);
        let rho = cca_coefficients(&r, &r).unwrap().rho;
        assert_eq!(rho.len(), 6);
        assert!(rho.iter().all(|p| (p - 1.0).abs() < 1e-8), "{rho:?}");
        let scaled = RepresentationMatrix::new(6, 200, r.data.iter().map(|v| 7.0 * v).collect());
        let a = cca_coefficients(&r, &random(4, 200, 2)).unwrap().rho;
        let b = cca_coefficients(&scaled, &random(4, 200, 2)).unwrap().rho;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_view_gives_zero() {
        let z = RepresentationMatrix::new(3, 10, vec![0.0; 30]);
        assert_eq!(cca_coefficients(&z, &random(3, 10, 5)).unwrap().rho, vec![0.0; 3]);
    }

    #[test]
    fn dead_row_is_tolerated() {
        let mut r = random(4, 100, 3);
        for v in &mut r.data[..100] {
            *v = 0.0;
        }
        let rho = cca_coefficients(&r, &r).unwrap().rho;
        assert!(rho[..3].iter().all(|p| (p - 1.0).abs() < 1e-8), "{rho:?}");
        assert!(rho[3].abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let r = random(5, 5, 1);
        assert!(cca_coefficients(&r, &r).is_err());
        assert!(cca_coefficients(&random(2, 10, 1), &random(2, 11, 1)).is_err());
        let mut nan = random(2, 10, 1);
        nan.data[3] = f64::NAN;
        assert!(cca_coefficients(&nan, &random(2, 10, 2)).is_err());
    }
}
