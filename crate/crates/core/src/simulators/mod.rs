//! Reparametrized generative models `x = tau(theta, z)`.
//!
//! Latent layouts, one row per observation:
//!
//! | model                | columns                                   |
//! |----------------------|-------------------------------------------|
//! | `gaussian_location`  | `dim` standard normals                    |
//! | `beta_binomial`      | `trials` uniform quantiles                |
//! | `mg1_queue`          | `[qu_1, qw_1, qu_2, qw_2, ...]` uniforms  |
//! | `bernstein_monotone` | `[u_x, eps]`: a uniform and a normal      |
//!
//! The queue is parameterized as `(theta1, theta2 - theta1, theta3)` everywhere
//! outside [`Model::simulate`].

mod bernstein;
mod data;
mod prior;

pub use bernstein::{bernstein_basis, tanh_regression_data, tanh_truth};
pub use data::{Dataset, LatentBlock, Matrix};
pub use prior::{reflect, PriorComponent, PriorSpec};

use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::row_rng;

/// Sharpness of the smoothed indicator used by the localization copy of
/// thresholded simulators.
pub const SMOOTH_INDICATOR_SCALE: f64 = 500.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum Model {
    GaussianLocation { dim: usize, sigma: f64 },
    BetaBinomial { trials: usize },
    Mg1Queue { steps: usize },
    BernsteinMonotone { order: usize, sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LatentKind {
    Uniform,
    Normal,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Model::GaussianLocation { dim, sigma } => dim >= 1 && sigma > 0.0 && sigma.is_finite(),
            Model::BetaBinomial { trials } => trials >= 1,
            Model::Mg1Queue { steps } => steps >= 1,
            Model::BernsteinMonotone { order, sigma } => order >= 1 && sigma > 0.0 && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid model constants {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Model::GaussianLocation { .. } => "gaussian_location",
            Model::BetaBinomial { .. } => "beta_binomial",
            Model::Mg1Queue { .. } => "mg1_queue",
            Model::BernsteinMonotone { .. } => "bernstein_monotone",
        }
    }

    pub fn theta_dim(&self) -> usize {
        match *self {
            Model::GaussianLocation { dim, .. } => dim,
            Model::BetaBinomial { .. } => 1,
            Model::Mg1Queue { .. } => 3,
            Model::BernsteinMonotone { order, .. } => order + 1,
        }
    }

    pub fn data_dim(&self) -> usize {
        match *self {
            Model::GaussianLocation { dim, .. } => dim,
            Model::BetaBinomial { .. } => 1,
            Model::Mg1Queue { steps } => steps,
            Model::BernsteinMonotone { .. } => 2,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match *self {
            Model::GaussianLocation { dim, .. } => dim,
            Model::BetaBinomial { trials } => trials,
            Model::Mg1Queue { steps } => 2 * steps,
            Model::BernsteinMonotone { .. } => 2,
        }
    }

    fn latent_kind(&self, col: usize) -> LatentKind {
        match self {
            Model::GaussianLocation { .. } => LatentKind::Normal,
            Model::BetaBinomial { .. } | Model::Mg1Queue { .. } => LatentKind::Uniform,
            Model::BernsteinMonotone { .. } => {
                if col == 0 {
                    LatentKind::Uniform
                } else {
                    LatentKind::Normal
                }
            }
        }
    }

    /// Whether the localization copy of the simulator is differentiable in theta.
    pub fn has_pathwise_gradient(&self) -> bool {
        !matches!(self, Model::Mg1Queue { .. })
    }

    pub fn default_prior(&self) -> PriorSpec {
        match *self {
            Model::GaussianLocation { dim, .. } => PriorSpec::uniform(&vec![(-10.0, 10.0); dim]),
            Model::BetaBinomial { .. } => PriorSpec::new(vec![PriorComponent::Beta { alpha: 1.0, beta: 1.0 }]),
            Model::Mg1Queue { .. } => PriorSpec::uniform(&[(0.0, 10.0), (0.0, 10.0), (0.0, 0.5)]),
            Model::BernsteinMonotone { order, .. } => {
                let mut b = vec![(-5.0, 5.0)];
                b.extend(std::iter::repeat_n((0.0, 1.0), order));
                PriorSpec::uniform(&b)
            }
        }
    }

    /// Latent block of `rows` observations; row `i` uses its own stream of `seed`.
    pub fn draw_latents(&self, rows: usize, seed: u64) -> LatentBlock {
        self.draw_latents_from(rows, seed, 0)
    }

    /// Like [`Model::draw_latents`] but starting at stream `first_row`.
    pub fn draw_latents_from(&self, rows: usize, seed: u64, first_row: u64) -> LatentBlock {
        let cols = self.latent_dim();
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut rng = row_rng(seed, first_row + i as u64);
            let row = m.row_mut(i);
            self.fill_latent_row(&mut rng, row);
        }
        m
    }

    pub(crate) fn fill_latent_row(&self, rng: &mut crate::rng::Rng, row: &mut [f64]) {
        for (c, v) in row.iter_mut().enumerate() {
            *v = match self.latent_kind(c) {
                LatentKind::Uniform => Open01.sample(rng),
                LatentKind::Normal => StandardNormal.sample(rng),
            };
        }
    }

    /// Domain of the simulator itself.
    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_dim() {
            return Err(Error::dim("theta", self.theta_dim(), theta.len()));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain("non-finite theta".into()));
        }
        match self {
            Model::BetaBinomial { .. } if !(0.0..=1.0).contains(&theta[0]) => {
                Err(Error::Domain(format!("success probability {} outside [0, 1]", theta[0])))
            }
            Model::Mg1Queue { .. } => {
                if theta[0] < 0.0 {
                    Err(Error::Domain(format!("theta1 = {} is negative", theta[0])))
                } else if theta[1] < 0.0 {
                    Err(Error::Domain("theta2 < theta1".into()))
                } else if theta[2] <= 0.0 {
                    Err(Error::Domain(format!("arrival rate theta3 = {} must be positive", theta[2])))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    fn check_latents(&self, z: &LatentBlock) -> Result<()> {
        if z.cols != self.latent_dim() {
            return Err(Error::dim("latent columns", self.latent_dim(), z.cols));
        }
        Ok(())
    }

    /// One observation from one latent row, unchecked.
    pub(crate) fn simulate_row(&self, theta: &[f64], z: &[f64], out: &mut [f64]) {
        match *self {
            Model::GaussianLocation { sigma, .. } => {
                for ((o, t), e) in out.iter_mut().zip(theta).zip(z) {
                    *o = t + sigma * e;
                }
            }
            Model::BetaBinomial { .. } => {
                out[0] = z.iter().filter(|&&u| u < theta[0]).count() as f64;
            }
            Model::Mg1Queue { steps } => {
                let (t1, t2, t3) = (theta[0], theta[0] + theta[1], theta[2]);
                let mut arrivals = 0.0;
                let mut departures = 0.0;
                for k in 0..steps {
                    let u = t1 + (t2 - t1) * z[2 * k];
                    let w = -(-z[2 * k + 1]).ln_1p() / t3;
                    arrivals += w;
                    let x = u + (arrivals - departures).max(0.0);
                    out[k] = x;
                    departures += x;
                }
            }
            Model::BernsteinMonotone { order, sigma } => {
                let x = z[0];
                let mut b = vec![0.0; order + 1];
                bernstein::fill_basis(order, x, &mut b);
                out[0] = x;
                out[1] = dot(theta, &b) + sigma * z[1];
            }
        }
    }

    /// `tau(theta, z)` row by row.
    pub fn simulate(&self, theta: &[f64], z: &LatentBlock) -> Result<Dataset> {
        self.check_theta(theta)?;
        self.check_latents(z)?;
        let p = self.data_dim();
        let mut out = Matrix::zeros(z.rows, p);
        for i in 0..z.rows {
            self.simulate_row(theta, z.row(i), out.row_mut(i));
        }
        Ok(out)
    }

    /// The simulator used inside localization: thresholds are replaced by the
    /// smoothed indicator `1 / (1 + exp(-500 t))`.
    pub fn simulate_smoothed(&self, theta: &[f64], z: &LatentBlock) -> Result<Dataset> {
        match self {
            Model::BetaBinomial { .. } => {
                self.check_theta(theta)?;
                self.check_latents(z)?;
                let mut out = Matrix::zeros(z.rows, 1);
                for i in 0..z.rows {
                    out.data[i] = z.row(i).iter().map(|&u| sigmoid(SMOOTH_INDICATOR_SCALE * (theta[0] - u))).sum();
                }
                Ok(out)
            }
            _ => self.simulate(theta, z),
        }
    }

    /// Smoothed simulation plus pathwise tangents `d x[i, c] / d theta_j`,
    /// stored as `rows x (p * d)` with `(c, j)` row-major inside each row.
    pub fn simulate_with_tangents(&self, theta: &[f64], z: &LatentBlock) -> Result<(Dataset, Matrix)> {
        if !self.has_pathwise_gradient() {
            return Err(Error::Input(format!("{} has no pathwise gradient", self.name())));
        }
        let data = self.simulate_smoothed(theta, z)?;
        let (p, d) = (self.data_dim(), self.theta_dim());
        let mut tan = Matrix::zeros(z.rows, p * d);
        for i in 0..z.rows {
            let t = tan.row_mut(i);
            match *self {
                Model::GaussianLocation { dim, .. } => {
                    for c in 0..dim {
                        t[c * d + c] = 1.0;
                    }
                }
                Model::BetaBinomial { .. } => {
                    t[0] = z
                        .row(i)
                        .iter()
                        .map(|&u| {
                            let s = sigmoid(SMOOTH_INDICATOR_SCALE * (theta[0] - u));
                            SMOOTH_INDICATOR_SCALE * s * (1.0 - s)
                        })
                        .sum();
                }
                Model::BernsteinMonotone { order, .. } => {
                    // x does not move with theta; y moves along the basis.
                    bernstein::fill_basis(order, z.row(i)[0], &mut t[d..2 * d]);
                }
                Model::Mg1Queue { .. } => unreachable!(),
            }
        }
        Ok((data, tan))
    }

    /// Exact `grad_theta log p_theta(x)` for models with a tractable likelihood.
    pub fn analytic_score(&self, theta: &[f64], x: &[f64]) -> Option<Vec<f64>> {
        self.analytic_score_jacobian(theta, x).map(|(s, _)| s)
    }

    /// Score and its row-major theta-Jacobian.
    pub fn analytic_score_jacobian(&self, theta: &[f64], x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.theta_dim();
        match *self {
            Model::GaussianLocation { sigma, .. } => {
                let v = sigma * sigma;
                let s = x.iter().zip(theta).map(|(a, t)| (a - t) / v).collect();
                let mut j = vec![0.0; d * d];
                for k in 0..d {
                    j[k * d + k] = -1.0 / v;
                }
                Some((s, j))
            }
            Model::BetaBinomial { trials } => {
                let (t, c, n) = (theta[0], x[0], trials as f64);
                let s = c / t - (n - c) / (1.0 - t);
                let j = -c / (t * t) - (n - c) / ((1.0 - t) * (1.0 - t));
                Some((vec![s], vec![j]))
            }
            Model::BernsteinMonotone { order, sigma } => {
                let v = sigma * sigma;
                let mut b = vec![0.0; order + 1];
                bernstein::fill_basis(order, x[0].clamp(0.0, 1.0), &mut b);
                let r = x[1] - dot(theta, &b);
                let s = b.iter().map(|bk| r * bk / v).collect();
                let mut j = vec![0.0; d * d];
                for k in 0..d {
                    for l in 0..d {
                        j[k * d + l] = -b[k] * b[l] / v;
                    }
                }
                Some((s, j))
            }
            Model::Mg1Queue { .. } => None,
        }
    }

    /// Full-data analytic score `sum_i s(theta, x_i)`.
    pub fn analytic_full_score(&self, theta: &[f64], data: &Dataset) -> Option<Vec<f64>> {
        let mut total = vec![0.0; self.theta_dim()];
        for r in data.iter_rows() {
            let s = self.analytic_score(theta, r)?;
            total.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        }
        Some(total)
    }

    /// Column names for datasets of this model.
    pub fn data_columns(&self) -> Vec<String> {
        match self {
            Model::BernsteinMonotone { .. } => vec!["x".into(), "y".into()],
            Model::BetaBinomial { .. } => vec!["count".into()],
            _ => (1..=self.data_dim()).map(|i| format!("x{i}")).collect(),
        }
    }

    pub fn theta_columns(&self) -> Vec<String> {
        (1..=self.theta_dim()).map(|i| format!("theta{i}")).collect()
    }
}

/// Convert queue parameters `(theta1, theta2, theta3)` to `(theta1, theta2 - theta1, theta3)`.
pub fn queue_prior_params(natural: [f64; 3]) -> [f64; 3] {
    [natural[0], natural[1] - natural[0], natural[2]]
}

/// Inverse of [`queue_prior_params`].
pub fn queue_natural_params(prior: &[f64]) -> [f64; 3] {
    [prior[0], prior[0] + prior[1], prior[2]]
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
