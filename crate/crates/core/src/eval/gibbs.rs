use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::rng::{derive_index_seed, rng_from_seed};
use crate::simulators::{bernstein_basis, Dataset, Matrix, Model};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Upper tail `P(Z > z)`.
fn upper(z: f64) -> f64 {
    0.5 * erfc(z / SQRT2)
}

/// Inverse of [`upper`].
fn upper_inv(p: f64) -> f64 {
    SQRT2 * erfc_inv(2.0 * p)
}

/// Standard normal restricted to `[a, b]` by inverse CDF at `u in (0, 1)`.
/// Works in the upper tail when the interval sits right of zero and mirrors
/// intervals on the left, so far tails keep their precision.
pub fn std_truncated_normal(a: f64, b: f64, u: f64) -> f64 {
    if a > 0.0 {
        let (pa, pb) = (upper(a), upper(b));
        if pa > 0.0 && pa > pb {
            return upper_inv(pa - u * (pa - pb)).clamp(a, b);
        }
        // beyond double range: exponential approximation of the tail
        let span = if b.is_finite() { b - a } else { f64::INFINITY };
        let t = -(1.0 - u * (1.0 - (-a * span).exp())).ln() / a;
        return (a + t).clamp(a, b);
    }
    if b < 0.0 {
        return -std_truncated_normal(-b, -a, u);
    }
    // interval straddles zero: lower tail probabilities are well conditioned
    let (fa, fb) = (1.0 - upper(a), 1.0 - upper(b));
    let p = fa + u * (fb - fa);
    if p <= 0.5 {
        (-upper_inv(p)).clamp(a, b)
    } else {
        upper_inv(1.0 - p).clamp(a, b)
    }
}

/// `N(mu, sd^2)` restricted to `[lo, hi]`.
pub fn truncated_normal(mu: f64, sd: f64, lo: f64, hi: f64, u: f64) -> f64 {
    mu + sd * std_truncated_normal((lo - mu) / sd, (hi - mu) / sd, u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsConfig {
    pub runs: usize,
    pub draws_per_run: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self { runs: 10, draws_per_run: 10_000, burn_in: 1000, thin: 1 }
    }
}

/// Coordinatewise Gibbs sampler for `N(mean, cov)` truncated to a box.
/// Runs are concatenated in order.
pub fn truncated_normal_reference(mean: &[f64], cov: &[f64], bounds: &[(f64, f64)], cfg: &GibbsConfig, seed: u64) -> Result<Matrix> {
    let d = mean.len();
    if cov.len() != d * d || bounds.len() != d {
        return Err(Error::dim("truncated normal", d, bounds.len()));
    }
    if bounds.iter().any(|(lo, hi)| !(lo < hi)) {
        return Err(Error::Input("infeasible box".into()));
    }
    if cfg.runs == 0 || cfg.thin == 0 {
        return Err(Error::Config("Gibbs needs at least one run and thinning of at least 1".into()));
    }
    let c = DMatrix::from_row_slice(d, d, cov);
    if (0..d).any(|i| (0..d).any(|j| (c[(i, j)] - c[(j, i)]).abs() > 1e-10 * (c[(i, j)].abs() + c[(j, i)].abs() + 1e-300))) {
        return Err(Error::Input("covariance is not symmetric".into()));
    }
    let precision = c
        .cholesky()
        .ok_or_else(|| Error::Input("covariance is not positive definite".into()))?
        .inverse();
    let mut out = Matrix::zeros(0, d);
    for r in 0..cfg.runs {
        let mut rng = rng_from_seed(derive_index_seed(seed, r as u64));
        let mut x: Vec<f64> = mean
            .iter()
            .zip(bounds)
            .map(|(m, &(lo, hi))| {
                if *m >= lo && *m <= hi {
                    *m
                } else if lo.is_finite() && hi.is_finite() {
                    0.5 * (lo + hi)
                } else {
                    m.clamp(lo, hi)
                }
            })
            .collect();
        for sweep in 0..cfg.burn_in + cfg.draws_per_run * cfg.thin {
            for j in 0..d {
                let pjj = precision[(j, j)];
                let mut acc = 0.0;
                for k in 0..d {
                    if k != j {
                        acc += precision[(j, k)] * (x[k] - mean[k]);
                    }
                }
                let mu = mean[j] - acc / pjj;
                let u: f64 = rng.random();
                let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                x[j] = truncated_normal(mu, 1.0 / pjj.sqrt(), bounds[j].0, bounds[j].1, u);
            }
            if sweep >= cfg.burn_in && (sweep - cfg.burn_in) % cfg.thin == 0 {
                out.push_row(&x)?;
            }
        }
    }
    Ok(out)
}

/// Untruncated Gaussian posterior of the Bernstein regression: mean
/// `(D^T D)^-1 D^T y` and covariance `sigma^2 (D^T D)^-1`.
pub fn bernstein_gaussian_posterior(model: &Model, data: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let Model::BernsteinMonotone { order, sigma } = *model else {
        return Err(Error::Input("closed-form regression posterior needs the Bernstein model".into()));
    };
    let d = order + 1;
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = nalgebra::DVector::<f64>::zeros(d);
    for r in data.iter_rows() {
        let b = bernstein_basis(order, r[0])?;
        for i in 0..d {
            xty[i] += b[i] * r[1];
            for j in 0..d {
                xtx[(i, j)] += b[i] * b[j];
            }
        }
    }
    let inv = xtx
        .cholesky()
        .ok_or_else(|| Error::Input("design matrix is rank deficient".into()))?
        .inverse();
    let mean = &inv * xty;
    let cov = inv * (sigma * sigma);
    let mut flat = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            flat.push(cov[(i, j)]);
        }
    }
    Ok((mean.iter().copied().collect(), flat))
}
