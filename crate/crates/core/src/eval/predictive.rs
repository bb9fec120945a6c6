use serde::{Deserialize, Serialize};

use super::metrics::{distribution_distances, quantile_sorted};
use crate::error::{Error, Result};
use crate::simulators::{bernstein_basis, Matrix};

pub const GRID_POINTS: usize = 101;

/// `x = 0.00, 0.01, ..., 1.00`.
pub fn predictive_grid() -> Vec<f64> {
    (0..GRID_POINTS).map(|i| i as f64 / 100.0).collect()
}

/// Regression curve `theta^T b(x)` for every draw (rows) and grid point (columns).
pub fn predictive_draws(samples: &Matrix, order: usize) -> Result<Matrix> {
    if samples.cols != order + 1 {
        return Err(Error::dim("regression theta", order + 1, samples.cols));
    }
    let basis: Vec<Vec<f64>> = predictive_grid().into_iter().map(|x| bernstein_basis(order, x)).collect::<Result<_>>()?;
    let mut out = Matrix::zeros(samples.rows, GRID_POINTS);
    for (r, t) in samples.iter_rows().enumerate() {
        let row = out.row_mut(r);
        for (g, b) in basis.iter().enumerate() {
            row[g] = b.iter().zip(t).map(|(a, c)| a * c).sum();
        }
    }
    Ok(out)
}

/// `101 x 4`: x, 2.5%, 50%, 97.5% quantiles of the regression curve.
pub fn credible_band(samples: &Matrix, order: usize) -> Result<Matrix> {
    if samples.rows == 0 {
        return Err(Error::Input("no posterior samples".into()));
    }
    let f = predictive_draws(samples, order)?;
    let mut out = Matrix::zeros(GRID_POINTS, 4);
    for (g, x) in predictive_grid().into_iter().enumerate() {
        let mut col = f.column(g);
        col.sort_by(f64::total_cmp);
        out.row_mut(g).copy_from_slice(&[x, quantile_sorted(&col, 0.025), quantile_sorted(&col, 0.5), quantile_sorted(&col, 0.975)]);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictivePoint {
    pub x: f64,
    pub ks: f64,
    pub w1: f64,
    pub lower: f64,
    pub upper: f64,
    pub truth: f64,
    pub covers: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveReport {
    pub average_ks: f64,
    pub average_w1: f64,
    /// Fraction of grid points whose 95% band covers the true curve.
    pub coverage: f64,
    pub points: Vec<PredictivePoint>,
}

/// Grid-averaged KS and W1 between the curve distributions of `samples` and
/// `reference`, and band coverage of `truth`.
pub fn predictive_comparison(samples: &Matrix, reference: &Matrix, order: usize, truth: &dyn Fn(f64) -> f64) -> Result<PredictiveReport> {
    let fa = predictive_draws(samples, order)?;
    let fb = predictive_draws(reference, order)?;
    let band = credible_band(samples, order)?;
    let mut points = Vec::with_capacity(GRID_POINTS);
    for (g, x) in predictive_grid().into_iter().enumerate() {
        let (ks, w1) = distribution_distances(&fa.column(g), &fb.column(g))?;
        let (lower, upper) = (band.row(g)[1], band.row(g)[3]);
        let t = truth(x);
        points.push(PredictivePoint { x, ks, w1, lower, upper, truth: t, covers: lower <= t && t <= upper });
    }
    let n = GRID_POINTS as f64;
    Ok(PredictiveReport {
        average_ks: points.iter().map(|p| p.ks).sum::<f64>() / n,
        average_w1: points.iter().map(|p| p.w1).sum::<f64>() / n,
        coverage: points.iter().filter(|p| p.covers).count() as f64 / n,
        points,
    })
}
