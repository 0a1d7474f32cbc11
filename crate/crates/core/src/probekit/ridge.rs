//! Closed-form ridge regression with an unpenalized intercept.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Column means and scales computed on the train split only.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let m = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mu = col.sum() / m;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
            mean.push(mu);
            // constant columns standardize to zero
            scale.push(if var > 1e-24 { var.sqrt() } else { f64::INFINITY });
        }
        Self { mean, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let s = self.scale[j];
            if s.is_finite() {
                (x[(i, j)] - self.mean[j]) / s
            } else {
                0.0
            }
        })
    }
}

/// Ridge solution in standardized feature space.
#[derive(Debug, Clone)]
pub struct RidgeModel {
    pub weights: DVector<f64>,
    pub intercept: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (x * &self.weights).iter().map(|v| v + self.intercept).collect()
    }
}

/// Solves `min ||y - b - X w||² + λ||w||²` for column-centred `x`.
///
/// Uses the primal normal equations when `p <= m` and the dual (kernel) form
/// `w = Xᵀ (X Xᵀ + λI)⁻¹ (y - ȳ)` otherwise; both give the same minimizer.
pub fn ridge_fit(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("ridge lambda must be > 0, got {lambda}")));
    }
    let (m, p) = x.shape();
    let y_mean = y.iter().sum::<f64>() / m as f64;
    let yc = DVector::from_iterator(m, y.iter().map(|v| v - y_mean));
    let weights = if p <= m {
        let mut gram = x.tr_mul(x);
        for i in 0..p {
            gram[(i, i)] += lambda;
        }
        let rhs = x.tr_mul(&yc);
        solve_spd(gram, rhs)?
    } else {
        let mut gram = x * x.transpose();
        for i in 0..m {
            gram[(i, i)] += lambda;
        }
        let alpha = solve_spd(gram, yc)?;
        x.tr_mul(&alpha)
    };
    Ok(RidgeModel { weights, intercept: y_mean })
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Divergence("ridge system is not positive definite".into()))?;
    Ok(chol.solve(&b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primal_and_dual_agree() {
        // 6 rows, 9 columns forces the dual branch; transpose problem checks primal.
        let x = DMatrix::from_fn(6, 9, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let std = Standardizer::fit(&x);
        let xs = std.apply(&x);
        let y: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 1.0).collect();
        let dual = ridge_fit(&xs, &y, 0.5).unwrap();
        // primal solve written out for the same data
        let mut gram = xs.tr_mul(&xs);
        for i in 0..9 {
            gram[(i, i)] += 0.5;
        }
        let ym = y.iter().sum::<f64>() / 6.0;
        let yc = DVector::from_iterator(6, y.iter().map(|v| v - ym));
        let primal = gram.lu().solve(&xs.tr_mul(&yc)).unwrap();
        for (a, b) in dual.weights.iter().zip(primal.iter()) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let s = Standardizer::fit(&x).apply(&x);
        assert!(s.column(1).iter().all(|v| *v == 0.0));
        assert!((s.column(0).sum()).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_lambda() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(ridge_fit(&x, &[1.0, 2.0, 3.0], 0.0).is_err());
    }
}
