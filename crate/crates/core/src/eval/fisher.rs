use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_index_seed, derive_seed};
use crate::simulators::{Matrix, Model};

/// Score value and row-major theta-Jacobian at `(theta, x)`.
pub type ScoreJacFn<'a> = dyn FnMut(&[f64], &[f64]) -> Result<(Vec<f64>, Vec<f64>)> + 'a;
/// Score value at `(theta, x)`.
pub type ScoreFn<'a> = dyn FnMut(&[f64], &[f64]) -> Result<Vec<f64>> + 'a;

/// Monte Carlo norms of `E[s]` and `E[s s^T + grad s]`, each with the root
/// mean square error of its vector estimate, `sqrt(sum_j se_j^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherResiduals {
    pub mean_norm: f64,
    pub mean_se: f64,
    pub curvature_norm: f64,
    pub curvature_se: f64,
    pub draws: usize,
}

impl FisherResiduals {
    /// True when both norms are within `k` standard errors.
    pub fn within(&self, k: f64) -> bool {
        self.mean_norm <= k * self.mean_se && self.curvature_norm <= k * self.curvature_se
    }
}

/// Sums are of values shifted by `shift` to keep the variance well conditioned.
fn norm_and_se(shift: &[f64], sum: &[f64], sum_sq: &[f64], m: f64) -> (f64, f64) {
    let mut norm = 0.0;
    let mut se2 = 0.0;
    for ((c, s), q) in shift.iter().zip(sum).zip(sum_sq) {
        let centered = s / m;
        let var = ((q / m - centered * centered) * m / (m - 1.0)).max(0.0);
        let mean = c + centered;
        norm += mean * mean;
        se2 += var / m;
    }
    (norm.sqrt(), se2.sqrt())
}

/// Fisher-identity residuals of `score` at `theta` over `m` fresh draws.
pub fn fisher_residuals(score: &mut ScoreJacFn, model: &Model, theta: &[f64], m: usize, seed: u64) -> Result<FisherResiduals> {
    if m < 2 {
        return Err(Error::Input("need at least two draws".into()));
    }
    let d = model.theta_dim();
    let z = model.draw_latents(m, seed);
    let data = model.simulate(theta, &z)?;
    let (mut s1, mut s2) = (vec![0.0; d], vec![0.0; d]);
    let (mut c1, mut c2) = (vec![0.0; d * d], vec![0.0; d * d]);
    let mut shift: Option<(Vec<f64>, Vec<f64>)> = None;
    for x in data.iter_rows() {
        let (s, j) = score(theta, x)?;
        if s.len() != d || j.len() != d * d {
            return Err(Error::dim("score", d, s.len()));
        }
        let curv: Vec<f64> = (0..d * d).map(|ab| s[ab / d] * s[ab % d] + j[ab]).collect();
        let (ks, kc) = shift.get_or_insert_with(|| (s.clone(), curv.clone()));
        for a in 0..d {
            let v = s[a] - ks[a];
            s1[a] += v;
            s2[a] += v * v;
        }
        for ab in 0..d * d {
            let v = curv[ab] - kc[ab];
            c1[ab] += v;
            c2[ab] += v * v;
        }
    }
    let (ks, kc) = shift.unwrap_or_default();
    let mf = m as f64;
    let (mean_norm, mean_se) = norm_and_se(&ks, &s1, &s2, mf);
    let (curvature_norm, curvature_se) = norm_and_se(&kc, &c1, &c2, mf);
    Ok(FisherResiduals { mean_norm, mean_se, curvature_norm, curvature_se, draws: m })
}

/// Residuals of the model's closed-form score.
pub fn analytic_fisher_residuals(model: &Model, theta: &[f64], m: usize, seed: u64) -> Result<FisherResiduals> {
    let mut f = |t: &[f64], x: &[f64]| {
        model
            .analytic_score_jacobian(t, x)
            .ok_or_else(|| Error::Input(format!("{} has no analytic score", model.name())))
    };
    fisher_residuals(&mut f, model, theta, m, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanWithSe {
    pub mean: f64,
    pub se: f64,
}

fn mean_se(v: &[f64]) -> MeanWithSe {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    MeanWithSe { mean, se: (var / n).sqrt() }
}

/// Score-estimation losses against the analytic score: single observation,
/// `n` observations with theta from a sampling table, and `n` observations
/// with theta from posterior draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLosses {
    pub loss_1: MeanWithSe,
    pub loss_n: MeanWithSe,
    pub loss_n_posterior: Option<MeanWithSe>,
}

/// `(mean over rows of ||e_i||^2, ||sum_i e_i||^2)` per theta row, where
/// `e = s - s*` on a fresh dataset of `n` observations.
fn error_terms(score: &mut ScoreFn, model: &Model, thetas: &Matrix, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = model.theta_dim();
    let mut single = Vec::with_capacity(thetas.rows);
    let mut full = Vec::with_capacity(thetas.rows);
    for (k, theta) in thetas.iter_rows().enumerate() {
        let z = model.draw_latents(n, derive_index_seed(seed, k as u64));
        let data = model.simulate(theta, &z)?;
        let mut total = vec![0.0; d];
        let mut sq = 0.0;
        for x in data.iter_rows() {
            let s = score(theta, x)?;
            let star = model
                .analytic_score(theta, x)
                .ok_or_else(|| Error::Input(format!("{} has no analytic score", model.name())))?;
            for j in 0..d {
                let e = s[j] - star[j];
                total[j] += e;
                sq += e * e;
            }
        }
        single.push(sq / n as f64);
        full.push(total.iter().map(|v| v * v).sum());
    }
    Ok((single, full))
}

pub fn score_loss_triptych(
    score: &mut ScoreFn,
    model: &Model,
    table_theta: &Matrix,
    posterior_theta: Option<&Matrix>,
    n: usize,
    seed: u64,
) -> Result<ScoreLosses> {
    if table_theta.rows == 0 || n == 0 {
        return Err(Error::Input("score losses need parameters and observations".into()));
    }
    let (single, full) = error_terms(score, model, table_theta, n, derive_seed(seed, "table"))?;
    let loss_n_posterior = match posterior_theta {
        Some(p) if p.rows > 0 => Some(mean_se(&error_terms(score, model, p, n, derive_seed(seed, "posterior"))?.1)),
        _ => None,
    };
    Ok(ScoreLosses { loss_1: mean_se(&single), loss_n: mean_se(&full), loss_n_posterior })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Activation, Evaluator, NetSpec, NetworkWeights};

    #[test]
    fn analytic_scores_satisfy_the_identities() {
        let g = Model::GaussianLocation { dim: 2, sigma: 1.5 };
        let r = analytic_fisher_residuals(&g, &[0.3, -1.0], 100_000, 1).unwrap();
        assert!(r.within(4.0), "{r:?}");
        let b = Model::BetaBinomial { trials: 10 };
        assert!(analytic_fisher_residuals(&b, &[0.35], 100_000, 2).unwrap().within(4.0));
    }

    #[test]
    fn zero_score_has_zero_residuals() {
        let g = Model::GaussianLocation { dim: 2, sigma: 1.0 };
        let mut f = |_: &[f64], _: &[f64]| Ok((vec![0.0; 2], vec![0.0; 4]));
        let r = fisher_residuals(&mut f, &g, &[0.0, 0.0], 100, 1).unwrap();
        assert_eq!((r.mean_norm, r.curvature_norm), (0.0, 0.0));
    }

    #[test]
    fn constant_score_residual_is_its_norm() {
        let g = Model::GaussianLocation { dim: 2, sigma: 1.0 };
        let mut f = |_: &[f64], _: &[f64]| Ok((vec![0.6, 0.8], vec![0.0; 4]));
        let r = fisher_residuals(&mut f, &g, &[0.0, 0.0], 1000, 1).unwrap();
        assert!((r.mean_norm - 1.0).abs() < 1e-12);
        assert!(r.mean_se < 1e-12);
    }

    #[test]
    fn queue_has_no_analytic_residuals() {
        let q = Model::Mg1Queue { steps: 5 };
        assert!(analytic_fisher_residuals(&q, &[1.0, 4.0, 0.2], 10, 1).is_err());
    }

    #[test]
    fn exact_score_has_zero_losses() {
        let g = Model::GaussianLocation { dim: 1, sigma: 1.0 };
        let mut f = |t: &[f64], x: &[f64]| Ok(g.analytic_score(t, x).unwrap());
        let thetas = Matrix::from_rows(&[vec![0.1], vec![0.5]]).unwrap();
        let l = score_loss_triptych(&mut f, &g, &thetas, Some(&thetas), 10, 1).unwrap();
        assert_eq!(l.loss_1.mean, 0.0);
        assert_eq!(l.loss_n.mean, 0.0);
        assert_eq!(l.loss_n_posterior.unwrap().mean, 0.0);
    }

    #[test]
    fn full_data_error_splits_into_variance_and_bias() {
        // E||sum e_i||^2 = n E||e||^2 + n (n - 1) ||E e||^2 for iid errors
        let g = Model::GaussianLocation { dim: 1, sigma: 1.0 };
        let spec = NetSpec::new(1, 1, vec![4], Activation::Tanh);
        let w = NetworkWeights::init(&spec, 3);
        let mut ev = Evaluator::new(&spec, w.as_slice()).unwrap();
        let theta = [0.4];
        let mut err = |x: &[f64]| ev.forward(&theta, x).unwrap()[0] - (x[0] - theta[0]);

        let z = g.draw_latents(200_000, 5);
        let big = g.simulate(&theta, &z).unwrap();
        let e: Vec<f64> = big.iter_rows().map(&mut err).collect();
        let first = mean_se(&e);
        let second = mean_se(&e.iter().map(|v| v * v).collect::<Vec<_>>());
        let (m1, m2) = (first.mean, second.mean);

        let n = 10usize;
        let reps = 20_000;
        let z = g.draw_latents(n * reps, 6);
        let data = g.simulate(&theta, &z).unwrap();
        let totals: Vec<f64> = (0..reps)
            .map(|r| (0..n).map(|i| err(data.row(r * n + i))).sum::<f64>().powi(2))
            .collect();
        let emp = mean_se(&totals);
        let nf = n as f64;
        let predicted = nf * m2 + nf * (nf - 1.0) * m1 * m1;
        // delta-method error of the prediction, combined with the empirical one
        let pred_se = ((nf * second.se).powi(2) + (2.0 * nf * (nf - 1.0) * m1 * first.se).powi(2)).sqrt();
        let se = (emp.se * emp.se + pred_se * pred_se).sqrt();
        assert!((emp.mean - predicted).abs() < 4.0 * se, "{} vs {predicted}", emp.mean);
    }
}
