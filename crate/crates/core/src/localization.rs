//! Simulated method of moments under the sliced Wasserstein distance, and
//! the diagonal Gaussian proposal built from a pool of such estimates.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffnet::{AdamState, LrSchedule};
use crate::discrepancy::{DirectionSet, SlicedTarget, DEFAULT_DIRECTIONS};
use crate::error::{Error, Result};
use crate::rng::{derive_index_seed, derive_seed, rng_from_seed, Rng};
use crate::simulators::{Dataset, LatentBlock, Model, PriorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Pathwise when the model supports it, finite differences otherwise.
    Auto,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmmConfig {
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_stages: usize,
    pub directions: usize,
    /// Stop after this many iterations without a new best distance.
    pub patience: usize,
    pub gradient: GradientMode,
}

impl Default for SmmConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr_start: 0.1,
            lr_end: 1e-3,
            lr_stages: 10,
            directions: DEFAULT_DIRECTIONS,
            patience: 500,
            gradient: GradientMode::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationConfig {
    /// Pool size `B`.
    pub pool_size: usize,
    /// Simulated rows per estimate `m`; `None` uses the observed row count.
    pub sim_rows: Option<usize>,
    pub inflation: f64,
    /// Raise vanishing variances instead of failing.
    pub variance_floor: bool,
    /// Lower bound on every proposal variance after inflation. Pools whose
    /// members all stop on the same prior face otherwise report almost no
    /// spread in that coordinate.
    #[serde(default)]
    pub min_variance: Option<f64>,
    pub smm: SmmConfig,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            pool_size: 100,
            sim_rows: None,
            inflation: 1.0,
            variance_floor: true,
            min_variance: None,
            smm: SmmConfig::default(),
        }
    }
}

/// Outcome of one frozen-latent minimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmmEstimate {
    pub theta: Vec<f64>,
    pub distance: f64,
    pub initial_distance: f64,
    pub iterations: usize,
    pub simulator_calls: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolMember {
    pub index: usize,
    pub seed: u64,
    pub theta: Option<Vec<f64>>,
    pub distance: Option<f64>,
    pub initial_distance: Option<f64>,
    pub iterations: usize,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatePool {
    pub members: Vec<PoolMember>,
    /// Full simulated datasets generated while optimizing.
    pub simulator_calls: u64,
}

impl EstimatePool {
    pub fn successes(&self) -> Vec<&[f64]> {
        self.members.iter().filter_map(|m| m.theta.as_deref()).collect()
    }
}

/// Diagonal Gaussian `N(mean, diag(var))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inflation: f64,
    /// Coordinates whose variance was raised to the floor.
    #[serde(default)]
    pub floored: Vec<bool>,
}

impl Proposal {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Raises variances below `v` to `v` and flags them as floored.
    pub fn with_min_variance(mut self, v: f64) -> Result<Self> {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("minimum proposal variance must be positive, got {v}")));
        }
        for (var, f) in self.var.iter_mut().zip(self.floored.iter_mut()) {
            if *var < v {
                *var = v;
                *f = true;
            }
        }
        Ok(self)
    }

    pub fn sd(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| {
                let e: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * e
            })
            .collect()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.var)
            .zip(theta)
            .map(|((m, v), t)| -0.5 * (t - m).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln())
            .sum()
    }

    /// `grad log q(theta) = -(theta - mean) / var`.
    pub fn log_density_grad(&self, theta: &[f64]) -> Vec<f64> {
        self.mean.iter().zip(&self.var).zip(theta).map(|((m, v), t)| -(t - m) / v).collect()
    }
}

fn lr_scales(prior: &PriorSpec) -> Vec<f64> {
    prior
        .bounds()
        .iter()
        .map(|&(lo, hi)| if (hi - lo).is_finite() { (hi - lo) / 10.0 } else { 1.0 })
        .collect()
}

/// Closed prior box shrunk by a relative hair so boundary points stay inside
/// the simulator's domain.
fn projection_box(prior: &PriorSpec) -> Vec<(f64, f64)> {
    prior
        .bounds()
        .iter()
        .map(|&(lo, hi)| {
            let eps = 1e-9 * if (hi - lo).is_finite() { hi - lo } else { 1.0 + lo.abs() };
            (lo + eps, hi - eps)
        })
        .collect()
}

fn project(theta: &mut [f64], bx: &[(f64, f64)]) {
    for (t, &(lo, hi)) in theta.iter_mut().zip(bx) {
        *t = t.clamp(lo, hi);
    }
}

struct SmmProblem<'a> {
    model: &'a Model,
    target: SlicedTarget,
    z: &'a LatentBlock,
    calls: u64,
}

impl SmmProblem<'_> {
    fn value(&mut self, theta: &[f64]) -> Result<f64> {
        self.calls += 1;
        let x = self.model.simulate_smoothed(theta, self.z)?;
        self.target.distance(&x)
    }

    fn value_and_grad(&mut self, theta: &[f64], mode: GradientMode, bx: &[(f64, f64)]) -> Result<(f64, Vec<f64>)> {
        let d = theta.len();
        if mode == GradientMode::Auto && self.model.has_pathwise_gradient() {
            self.calls += 1;
            let (x, tan) = self.model.simulate_with_tangents(theta, self.z)?;
            let (v, gx) = self.target.distance_and_grad(&x)?;
            let p = x.cols;
            let mut g = vec![0.0; d];
            for i in 0..x.rows {
                let (gr, tr) = (gx.row(i), tan.row(i));
                for c in 0..p {
                    if gr[c] != 0.0 {
                        for j in 0..d {
                            g[j] += gr[c] * tr[c * d + j];
                        }
                    }
                }
            }
            return Ok((v, g));
        }
        let v = self.value(theta)?;
        let mut g = vec![0.0; d];
        let mut probe = theta.to_vec();
        for j in 0..d {
            let h = 1e-4 * (1.0 + theta[j].abs());
            let up = (theta[j] + h).min(bx[j].1);
            let dn = (theta[j] - h).max(bx[j].0);
            probe[j] = up;
            let fu = self.value(&probe)?;
            probe[j] = dn;
            let fd = self.value(&probe)?;
            probe[j] = theta[j];
            g[j] = if up > dn { (fu - fd) / (up - dn) } else { 0.0 };
        }
        Ok((v, g))
    }
}

/// Minimize `sliced_w(tau(theta, z), x_star)` over theta with `z` frozen,
/// starting from `init`. Returns the best iterate visited.
pub fn smm_estimate(
    model: &Model,
    prior: &PriorSpec,
    x_star: &Dataset,
    z: &LatentBlock,
    dirs: DirectionSet,
    init: &[f64],
    cfg: &SmmConfig,
) -> Result<SmmEstimate> {
    if init.len() != model.theta_dim() {
        return Err(Error::dim("initial theta", model.theta_dim(), init.len()));
    }
    let mut problem = SmmProblem { model, target: SlicedTarget::new(x_star, dirs)?, z, calls: 0 };
    let bx = projection_box(prior);
    let mut theta = init.to_vec();
    project(&mut theta, &bx);
    let scales = lr_scales(prior);
    let schedule = LrSchedule::StepDecay {
        start: cfg.lr_start,
        end: cfg.lr_end,
        stages: cfg.lr_stages.max(1),
        total_steps: cfg.iterations.max(1),
    };
    let mut adam = AdamState::new(theta.len(), schedule);
    let mut best = (f64::INFINITY, theta.clone());
    let mut initial = None;
    let mut since_best = 0;
    let mut iters = 0;
    for _ in 0..cfg.iterations {
        let (v, g) = problem.value_and_grad(&theta, cfg.gradient, &bx)?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("localization objective"));
        }
        initial.get_or_insert(v);
        if v < best.0 {
            best = (v, theta.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
        adam.step_scaled(&mut theta, &g, Some(&scales))?;
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::non_finite("localization iterate"));
        }
        project(&mut theta, &bx);
        iters += 1;
    }
    let v = problem.value(&theta)?;
    let initial_distance = match initial {
        Some(i) => i,
        None => v,
    };
    if v < best.0 {
        best = (v, theta.clone());
    }
    Ok(SmmEstimate {
        theta: best.1,
        distance: best.0,
        initial_distance,
        iterations: iters,
        simulator_calls: problem.calls,
    })
}

/// Run `B` independent frozen-latent estimates.
pub fn localize(
    model: &Model,
    prior: &PriorSpec,
    x_star: &Dataset,
    cfg: &LocalizationConfig,
    seed: u64,
) -> Result<EstimatePool> {
    model.validate()?;
    prior.validate()?;
    if x_star.cols != model.data_dim() {
        return Err(Error::dim("observed columns", model.data_dim(), x_star.cols));
    }
    if prior.dim() != model.theta_dim() {
        return Err(Error::dim("prior dimension", model.theta_dim(), prior.dim()));
    }
    let m = cfg.sim_rows.unwrap_or(x_star.rows);
    let mut members = Vec::with_capacity(cfg.pool_size);
    let mut calls = 0;
    for b in 0..cfg.pool_size {
        let member_seed = derive_index_seed(seed, b as u64);
        let z = model.draw_latents(m, derive_seed(member_seed, "latents"));
        let dirs = DirectionSet::random(cfg.smm.directions, model.data_dim(), derive_seed(member_seed, "directions"));
        let init = prior.sample(&mut rng_from_seed(derive_seed(member_seed, "init")));
        let mut member = PoolMember {
            index: b,
            seed: member_seed,
            theta: None,
            distance: None,
            initial_distance: None,
            iterations: 0,
            failure: None,
        };
        match smm_estimate(model, prior, x_star, &z, dirs, &init, &cfg.smm) {
            Ok(est) => {
                calls += est.simulator_calls;
                member.theta = Some(est.theta);
                member.distance = Some(est.distance);
                member.initial_distance = Some(est.initial_distance);
                member.iterations = est.iterations;
            }
            Err(e) => member.failure = Some(e.to_string()),
        }
        members.push(member);
    }
    Ok(EstimatePool { members, simulator_calls: calls })
}

/// Pool mean and inflated per-coordinate sample variance.
pub fn build_proposal(pool: &EstimatePool, inflation: f64, variance_floor: bool) -> Result<Proposal> {
    if !(inflation > 0.0 && inflation.is_finite()) {
        return Err(Error::Config(format!("inflation must be positive, got {inflation}")));
    }
    let ok = pool.successes();
    if ok.len() < 2 {
        return Err(Error::Localization(format!("{} successful estimates, need at least 2", ok.len())));
    }
    let d = ok[0].len();
    let b = ok.len() as f64;
    let mut mean = vec![0.0; d];
    for t in &ok {
        for j in 0..d {
            mean[j] += t[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= b);
    let mut var = vec![0.0; d];
    for t in &ok {
        for j in 0..d {
            var[j] += (t[j] - mean[j]).powi(2);
        }
    }
    let mut floored = vec![false; d];
    for j in 0..d {
        var[j] = inflation * var[j] / (b - 1.0);
        if var[j] < 1e-10 {
            if !variance_floor {
                return Err(Error::Localization(format!("zero proposal variance in coordinate {j}")));
            }
            var[j] = (1e-5 * (1.0 + mean[j].abs())).powi(2);
            floored[j] = true;
        }
    }
    Ok(Proposal { mean, var, inflation, floored })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulators::Matrix;

    fn pool_of(thetas: &[Vec<f64>]) -> EstimatePool {
        EstimatePool {
            members: thetas
                .iter()
                .enumerate()
                .map(|(i, t)| PoolMember {
                    index: i,
                    seed: i as u64,
                    theta: Some(t.clone()),
                    distance: Some(0.0),
                    initial_distance: Some(0.0),
                    iterations: 0,
                    failure: None,
                })
                .collect(),
            simulator_calls: 0,
        }
    }

    #[test]
    fn proposal_by_hand() {
        let p = build_proposal(&pool_of(&[vec![0.0, 0.0], vec![2.0, 2.0]]), 1.0, true).unwrap();
        assert_eq!(p.mean, vec![1.0, 1.0]);
        assert_eq!(p.var, vec![2.0, 2.0]);
        let p4 = build_proposal(&pool_of(&[vec![0.0, 0.0], vec![2.0, 2.0]]), 4.0, true).unwrap();
        for (a, b) in p4.sd().iter().zip(p.sd()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_pool() {
        let pool = pool_of(&[vec![1.0], vec![1.0], vec![1.0]]);
        assert!(matches!(build_proposal(&pool, 1.0, false), Err(Error::Localization(_))));
        let p = build_proposal(&pool, 1.0, true).unwrap();
        assert_eq!(p.floored, vec![true]);
        assert!(p.var[0] > 0.0);
        assert!(build_proposal(&pool_of(&[vec![1.0]]), 1.0, true).is_err());
        let m = p.clone().with_min_variance(0.5).unwrap();
        assert_eq!(m.var, vec![0.5]);
        assert!(p.with_min_variance(0.0).is_err());
        let wide = Proposal { mean: vec![0.0, 0.0], var: vec![2.0, 0.1], inflation: 1.0, floored: vec![false, false] };
        let m = wide.with_min_variance(0.5).unwrap();
        assert_eq!(m.var, vec![2.0, 0.5]);
        assert_eq!(m.floored, vec![false, true]);
    }

    #[test]
    fn failed_members_are_excluded() {
        let mut pool = pool_of(&[vec![0.0], vec![2.0], vec![100.0]]);
        pool.members[2].theta = None;
        pool.members[2].failure = Some("diverged".into());
        let p = build_proposal(&pool, 1.0, true).unwrap();
        assert_eq!(p.mean, vec![1.0]);
    }

    #[test]
    fn exact_match_is_recovered() {
        let model = Model::GaussianLocation { dim: 1, sigma: 1.0 };
        let prior = PriorSpec::uniform(&[(-10.0, 10.0)]);
        let x_star = Matrix::from_vec(20, 1, vec![2.5; 20]).unwrap();
        let z = Matrix::zeros(20, 1);
        let dirs = DirectionSet::random(10, 1, 3);
        let est = smm_estimate(&model, &prior, &x_star, &z, dirs, &[-4.0], &SmmConfig::default()).unwrap();
        assert!((est.theta[0] - 2.5).abs() < 1e-3, "{est:?}");
        assert!(est.distance < 1e-3);
        assert!(est.distance <= est.initial_distance);
    }

    #[test]
    fn finite_difference_mode_also_converges() {
        let model = Model::Mg1Queue { steps: 5 };
        let prior = model.default_prior();
        let truth = [1.0, 4.0, 0.2];
        let x_star = model.simulate(&truth, &model.draw_latents(200, 1)).unwrap();
        let z = model.draw_latents(200, 2);
        let cfg = SmmConfig { iterations: 300, ..SmmConfig::default() };
        let est = smm_estimate(&model, &prior, &x_star, &z, DirectionSet::random(50, 5, 4), &[5.0, 5.0, 0.25], &cfg)
            .unwrap();
        assert!(est.distance <= est.initial_distance);
        let at_truth = SlicedTarget::new(&x_star, DirectionSet::random(50, 5, 4))
            .unwrap()
            .distance(&model.simulate(&truth, &z).unwrap())
            .unwrap();
        // theta1 and theta2 trade off at this sample size; the arrival rate does not
        assert!(est.distance <= at_truth, "{est:?} vs {at_truth}");
        assert!((est.theta[2] - 0.2).abs() < 0.02, "{est:?}");
    }

    #[test]
    fn pool_is_reproducible_and_mean_in_hull() {
        let model = Model::GaussianLocation { dim: 2, sigma: 1.0 };
        let prior = model.default_prior();
        let x_star = model.simulate(&[1.0, -1.0], &model.draw_latents(100, 8)).unwrap();
        let cfg = LocalizationConfig {
            pool_size: 4,
            smm: SmmConfig { directions: 20, ..SmmConfig::default() },
            ..LocalizationConfig::default()
        };
        let a = localize(&model, &prior, &x_star, &cfg, 5).unwrap();
        let b = localize(&model, &prior, &x_star, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let p = build_proposal(&a, 1.0, true).unwrap();
        for j in 0..2 {
            let vals: Vec<f64> = a.successes().iter().map(|t| t[j]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(p.mean[j] >= lo && p.mean[j] <= hi);
            assert!((p.mean[j] - [1.0, -1.0][j]).abs() < 0.5);
        }
        assert!(a.members.iter().all(|m| prior.contains(m.theta.as_ref().unwrap())));
    }

    #[test]
    fn pool_error_matches_rate() {
        let model = Model::GaussianLocation { dim: 2, sigma: 1.0 };
        let prior = model.default_prior();
        let truth = [0.7, -0.3];
        let n = 400;
        let x_star = model.simulate(&truth, &model.draw_latents(n, 21)).unwrap();
        let cfg = LocalizationConfig { pool_size: 20, ..LocalizationConfig::default() };
        let pool = localize(&model, &prior, &x_star, &cfg, 1).unwrap();
        let mut errs: Vec<f64> = pool
            .successes()
            .iter()
            .map(|t| t.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        errs.sort_by(f64::total_cmp);
        let median = 0.5 * (errs[9] + errs[10]);
        let bound = 5.0 * (2.0 / (n as f64).sqrt());
        assert!(median <= bound, "{median} > {bound}");
    }
}
