//! Ordinary least squares with an intercept.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::rank::mean;
use super::special::student_t_two_sided;
use crate::error::{Error, Result};

/// Columns whose component orthogonal to the earlier columns is smaller than
/// this fraction of their norm are treated as linearly dependent.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    /// `"intercept"` followed by the predictor names.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub n: usize,
    pub standardized: bool,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl RegressionResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }
}

struct Fit {
    beta: DVector<f64>,
    residuals: DVector<f64>,
    /// Inverse of R from the QR factorization of the design.
    r_inv: DMatrix<f64>,
}

fn design(n: usize, columns: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(n, columns.len() + 1, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] })
}

fn fit(y: &[f64], columns: &[Vec<f64>]) -> Result<Fit> {
    let n = y.len();
    if let Some(c) = columns.iter().find(|c| c.len() != n) {
        return Err(Error::Shape(format!("predictor of length {} for n = {n}", c.len())));
    }
    let x = design(n, columns);
    let norms: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
    let qr = x.qr();
    let r = qr.r();
    for j in 0..r.ncols() {
        if norms[j] == 0.0 || r[(j, j)].abs() <= RANK_TOL * norms[j] {
            return Err(Error::Collinearity(format!(
                "design column {j} is linearly dependent on the others"
            )));
        }
    }
    let yv = DVector::from_column_slice(y);
    let r_inv = r
        .try_inverse()
        .ok_or_else(|| Error::Collinearity("R factor is singular".into()))?;
    let beta = &r_inv * (qr.q().transpose() * &yv);
    let residuals = &yv - design(n, columns) * &beta;
    Ok(Fit { beta, residuals, r_inv })
}

/// Residuals of `y` after least-squares projection on `columns` plus an intercept.
pub(crate) fn residualize(y: &[f64], columns: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(fit(y, columns)?.residuals.iter().copied().collect())
}

fn zscore(v: &[f64]) -> Result<Vec<f64>> {
    let m = mean(v);
    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
    if !(var > 0.0) {
        return Err(Error::Collinearity("constant column cannot be standardized".into()));
    }
    let sd = var.sqrt();
    Ok(v.iter().map(|a| (a - m) / sd).collect())
}

/// Multiple linear regression of `y` on the named predictor columns.
///
/// With `standardize`, the response and every predictor are z-scored first
/// so slopes are comparable across predictors.
pub fn ols_regression(
    y: &[f64],
    predictors: &[(String, Vec<f64>)],
    standardize: bool,
) -> Result<RegressionResult> {
    let n = y.len();
    let p = predictors.len();
    if n <= p + 1 {
        return Err(Error::Domain(format!("n = {n} is too small for {p} predictors")));
    }
    let (y, columns): (Vec<f64>, Vec<Vec<f64>>) = if standardize {
        (
            zscore(y)?,
            predictors.iter().map(|(_, c)| zscore(c)).collect::<Result<_>>()?,
        )
    } else {
        (y.to_vec(), predictors.iter().map(|(_, c)| c.clone()).collect())
    };
    let fit = fit(&y, &columns)?;
    let df = (n - p - 1) as f64;
    let rss: f64 = fit.residuals.iter().map(|r| r * r).sum();
    let my = mean(&y);
    let tss: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sigma2 = rss / df;
    let mut std_errors = Vec::with_capacity(p + 1);
    let mut t_stats = Vec::with_capacity(p + 1);
    let mut p_values = Vec::with_capacity(p + 1);
    for j in 0..=p {
        // diag of (X'X)^-1 = row norms of R^-1
        let v: f64 = fit.r_inv.row(j).iter().map(|a| a * a).sum();
        let se = (sigma2 * v).sqrt();
        let b = fit.beta[j];
        let t = if se > 0.0 {
            (b / se).clamp(-f64::MAX, f64::MAX)
        } else if b == 0.0 {
            0.0
        } else {
            b.signum() * f64::MAX
        };
        std_errors.push(se);
        t_stats.push(t);
        p_values.push(student_t_two_sided(t, df));
    }
    let r_squared = if tss > 0.0 { (1.0 - rss / tss).clamp(0.0, 1.0) } else { 0.0 };
    let mut names = vec!["intercept".to_string()];
    names.extend(predictors.iter().map(|(n, _)| n.clone()));
    Ok(RegressionResult {
        names,
        coefficients: fit.beta.iter().copied().collect(),
        std_errors,
        t_stats,
        p_values,
        r_squared,
        n,
        standardized: standardize,
        residuals: fit.residuals.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn exact_fit() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
        let r = ols_regression(&x, &[("x".into(), x.clone())], false).unwrap();
        assert!((r.coefficient("x").unwrap() - 1.0).abs() < 1e-12);
        assert!((r.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_known_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 500;
        let x1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * x1[i] - x2[i] + 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let r = ols_regression(&y, &[("x1".into(), x1.clone()), ("x2".into(), x2.clone())], false).unwrap();
        assert!((r.coefficient("x1").unwrap() - 2.0).abs() < 0.05);
        assert!((r.coefficient("x2").unwrap() + 1.0).abs() < 0.05);
        // residuals orthogonal to every column
        for col in [&x1, &x2] {
            let dot: f64 = col.iter().zip(&r.residuals).map(|(a, b)| a * b).sum();
            let scale = col.iter().map(|a| a * a).sum::<f64>().sqrt()
                * r.residuals.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(dot.abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn independent_response_has_small_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2000;
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let r = ols_regression(&y, &[("x".into(), x)], true).unwrap();
        assert!(r.r_squared < 0.01);
        assert!(r.p_values[1] > 0.01);
    }

    #[test]
    fn collinear_design_rejected() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let twice: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        assert!(matches!(
            ols_regression(&y, &[("a".into(), x), ("b".into(), twice)], false),
            Err(Error::Collinearity(_))
        ));
        assert!(matches!(
            ols_regression(&y, &[("c".into(), vec![1.0; 10])], false),
            Err(Error::Collinearity(_))
        ));
    }
}
