//! Cumulative Bernstein basis for monotone regression.

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::data::Matrix;
use crate::error::{Error, Result};
use crate::rng::row_rng;

/// The curve behind the regression benchmark data.
pub fn tanh_truth(x: f64) -> f64 {
    (4.0 * x + 2.0).tanh()
}

/// `n` rows of `(x, tanh(4x + 2) + sigma e)` with `x ~ U(0, 1)`, `e ~ N(0, 1)`.
pub fn tanh_regression_data(n: usize, sigma: f64, seed: u64) -> Matrix {
    let mut m = Matrix::zeros(n, 2);
    for i in 0..n {
        let mut rng = row_rng(seed, i as u64);
        let x: f64 = rng.random();
        let e: f64 = rng.sample(StandardNormal);
        m.row_mut(i).copy_from_slice(&[x, tanh_truth(x) + sigma * e]);
    }
    m
}

/// `b_M(x, k) = sum_{j >= k} C(M, j) x^j (1 - x)^(M - j)` for `k = 0..=M`.
pub fn bernstein_basis(order: usize, x: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("bernstein argument {x} outside [0, 1]")));
    }
    let mut out = vec![0.0; order + 1];
    fill_basis(order, x, &mut out);
    Ok(out)
}

/// Unchecked variant writing into `out` (length `order + 1`).
pub(crate) fn fill_basis(order: usize, x: f64, out: &mut [f64]) {
    let m = order;
    // binomial pmf terms, then suffix sums
    let mut coef = 1.0;
    for j in 0..=m {
        out[j] = coef * x.powi(j as i32) * (1.0 - x).powi((m - j) as i32);
        coef = coef * (m - j) as f64 / (j + 1) as f64;
    }
    for j in (0..m).rev() {
        out[j] += out[j + 1];
    }
    out[0] = 1.0;
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}
