//! Langevin Monte Carlo driven by an estimated full-data score.
//!
//! One step moves `theta <- theta + tau (beta s(theta, X) + grad log pi(theta)) + sqrt(2 tau) U`
//! and folds the result back into the support by mirror reflection.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::Proposal;
use crate::rng::{derive_index_seed, rng_from_seed, Rng};
use crate::scorematch::{DataUpperBound, ScoreEvaluator};
use crate::simulators::{reflect, Matrix, Model, PriorComponent, PriorSpec};

/// A likelihood score for a whole dataset.
pub trait ScoreModel {
    fn full_score(&mut self, theta: &[f64], data: &Matrix) -> Result<Vec<f64>>;
}

impl ScoreModel for ScoreEvaluator<'_> {
    fn full_score(&mut self, theta: &[f64], data: &Matrix) -> Result<Vec<f64>> {
        self.full(theta, data)
    }
}

/// Closed-form score of a model, summed over observations.
pub struct AnalyticScore<'a>(pub &'a Model);

impl ScoreModel for AnalyticScore<'_> {
    fn full_score(&mut self, theta: &[f64], data: &Matrix) -> Result<Vec<f64>> {
        self.0
            .analytic_full_score(theta, data)
            .ok_or_else(|| Error::Input(format!("{} has no analytic score", self.0.name())))
    }
}

/// Any closure `theta -> score`, ignoring the data argument.
pub struct FnScore<F>(pub F);

impl<F: FnMut(&[f64]) -> Vec<f64>> ScoreModel for FnScore<F> {
    fn full_score(&mut self, theta: &[f64], _data: &Matrix) -> Result<Vec<f64>> {
        Ok((self.0)(theta))
    }
}

/// Per-coordinate support used for reflection.
#[derive(Clone, Debug, PartialEq)]
pub struct Support {
    pub bounds: Vec<(f64, f64)>,
    /// Open ends are nudged inward after reflection.
    pub open: Vec<bool>,
}

impl Support {
    pub fn from_prior(prior: &PriorSpec) -> Self {
        Self {
            bounds: prior.bounds(),
            open: prior.components.iter().map(|c| !matches!(c, PriorComponent::Uniform { .. })).collect(),
        }
    }

    /// Tightens one coordinate's upper bound to `min(cap, min data)`.
    pub fn with_data_bound(mut self, upper: &DataUpperBound, data: &Matrix) -> Result<Self> {
        let (lo, hi) = self
            .bounds
            .get(upper.coord)
            .copied()
            .ok_or_else(|| Error::Input(format!("data bound on missing coordinate {}", upper.coord)))?;
        let b = hi.min(upper.bound(&data.data));
        if !(b > lo) {
            return Err(Error::Input(format!("data bound {b} leaves an empty interval above {lo}")));
        }
        self.bounds[upper.coord] = (lo, b);
        Ok(self)
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.iter().zip(&self.bounds).all(|(t, (lo, hi))| t >= lo && t <= hi)
    }

    /// Reflects every coordinate into its interval; true when anything moved.
    pub fn fold(&self, theta: &mut [f64]) -> bool {
        let mut moved = false;
        for ((t, &(lo, hi)), &open) in theta.iter_mut().zip(&self.bounds).zip(&self.open) {
            let r = reflect(*t, lo, hi);
            let r = if open {
                let eps = 1e-12 * (1.0 + lo.abs().max(if hi.is_finite() { hi.abs() } else { 0.0 }));
                r.clamp(lo + eps, if hi.is_finite() { hi - eps } else { f64::INFINITY })
            } else {
                r
            };
            if r != *t {
                moved = true;
                *t = r;
            }
        }
        moved
    }
}

/// Rescales `s` to norm `bound` when it is longer. A few ulps of slack keep
/// the map idempotent under rounding.
pub fn clip_score(s: &[f64], bound: f64) -> Vec<f64> {
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= bound * (1.0 + 8.0 * f64::EPSILON) {
        s.to_vec()
    } else {
        s.iter().map(|v| v * bound / norm).collect()
    }
}

/// The unconstrained move `theta + tau drift + sqrt(2 tau) noise`.
pub fn lmc_move(theta: &[f64], drift: &[f64], tau: f64, noise: &[f64]) -> Vec<f64> {
    let sd = (2.0 * tau).sqrt();
    theta.iter().zip(drift).zip(noise).map(|((t, d), u)| t + tau * d + sd * u).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub theta: Vec<f64>,
    pub step: usize,
    pub seed: u64,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub reflected: bool,
    pub clipped: bool,
    pub drift_norm: f64,
}

/// One Langevin step at tempering `state.beta`.
pub fn lmc_step(
    state: &mut ChainState,
    score: &mut dyn ScoreModel,
    data: &Matrix,
    prior: &PriorSpec,
    support: &Support,
    tau: f64,
    clip: Option<f64>,
    rng: &mut Rng,
) -> Result<StepInfo> {
    let d = state.theta.len();
    let raw = score.full_score(&state.theta, data)?;
    if raw.len() != d {
        return Err(Error::dim("score", d, raw.len()));
    }
    let (s, clipped) = match clip {
        Some(b) => {
            let c = clip_score(&raw, b);
            let changed = c != raw;
            (c, changed)
        }
        None => (raw, false),
    };
    let (_, pg) = prior.log_density_grad(&state.theta)?;
    let drift: Vec<f64> = s.iter().zip(&pg).map(|(a, b)| state.beta * a + b).collect();
    if drift.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("Langevin drift"));
    }
    let noise: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut next = lmc_move(&state.theta, &drift, tau, &noise);
    let reflected = support.fold(&mut next);
    state.theta = next;
    state.step += 1;
    Ok(StepInfo { reflected, clipped, drift_norm: drift.iter().map(|v| v * v).sum::<f64>().sqrt() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClipRule {
    /// `10 sqrt(n log n) sqrt(d)` with `n log n` floored at 1.
    Auto,
    Fixed { bound: f64 },
    Off,
}

impl ClipRule {
    pub fn resolve(&self, n: usize, d: usize) -> Result<Option<f64>> {
        match *self {
            ClipRule::Auto => {
                let nf = n as f64;
                Ok(Some(10.0 * (nf * nf.ln()).max(1.0).sqrt() * (d as f64).sqrt()))
            }
            ClipRule::Fixed { bound } if bound > 0.0 && bound.is_finite() => Ok(Some(bound)),
            ClipRule::Fixed { bound } => Err(Error::Config(format!("clip bound {bound} must be positive"))),
            ClipRule::Off => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub steps_per_stage: usize,
    /// `None` derives the step from the proposal: a tenth of its smallest variance.
    pub step_size: Option<f64>,
    pub ladder: Vec<f64>,
    pub burn_in: f64,
    pub thin: usize,
    pub clip: ClipRule,
    /// Keep draws from every stage instead of the last one only.
    pub emit_all_stages: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 20,
            steps_per_stage: 500,
            step_size: None,
            ladder: (1..=10).map(|i| i as f64 / 10.0).collect(),
            burn_in: 0.5,
            thin: 1,
            clip: ClipRule::Auto,
            emit_all_stages: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.chains == 0 || self.steps_per_stage == 0 {
            return bad("chains and steps per stage must be positive");
        }
        if let Some(t) = self.step_size {
            if !(t > 0.0 && t.is_finite()) {
                return bad("step size must be positive");
            }
        }
        if self.ladder.is_empty()
            || self.ladder.iter().any(|b| !(*b > 0.0 && *b <= 1.0))
            || self.ladder.windows(2).any(|w| w[1] < w[0])
            || *self.ladder.last().unwrap() != 1.0
        {
            return bad("tempering ladder must be nondecreasing in (0, 1] and end at 1");
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad("burn-in fraction must lie in [0, 1)");
        }
        if self.thin == 0 {
            return bad("thinning must be at least 1");
        }
        Ok(())
    }

    pub fn burn_steps(&self) -> usize {
        (self.burn_in * self.steps_per_stage as f64).floor() as usize
    }

    /// Draws each chain keeps per emitted stage.
    pub fn kept_per_stage(&self) -> usize {
        (self.steps_per_stage - self.burn_steps()).div_ceil(self.thin)
    }
}

/// Step size from a proposal: a tenth of its smallest variance.
pub fn step_from_proposal(q: &Proposal) -> f64 {
    0.1 * q.var.iter().cloned().fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitDistribution {
    Proposal { proposal: Proposal },
    Prior,
    Point { theta: Vec<f64> },
}

impl InitDistribution {
    fn draw(&self, prior: &PriorSpec, rng: &mut Rng) -> Vec<f64> {
        match self {
            InitDistribution::Proposal { proposal } => proposal.sample(rng),
            InitDistribution::Prior => prior.sample(rng),
            InitDistribution::Point { theta } => theta.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub chains: usize,
    pub failed_chains: Vec<(usize, String)>,
    pub step_size: f64,
    pub clip_bound: Option<f64>,
    pub steps: usize,
    pub reflection_rate: f64,
    pub clip_rate: f64,
    /// Drift norm at the 5, 25, 50, 75 and 95 percent levels.
    pub drift_norm_quantiles: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// `rows x d` pooled draws ordered by chain, then stage, then step.
    pub samples: Matrix,
    pub chain: Vec<usize>,
    pub stage: Vec<usize>,
    pub diagnostics: SamplerDiagnostics,
}

impl SampleOutput {
    pub fn to_csv(&self, theta_names: &[String]) -> Result<String> {
        let mut out = String::new();
        let mut header: Vec<String> = theta_names.to_vec();
        header.push("chain".into());
        header.push("stage".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for (i, r) in self.samples.iter_rows().enumerate() {
            let mut fields: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
            fields.push(self.chain[i].to_string());
            fields.push(self.stage[i].to_string());
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        Ok(out)
    }

    /// Pools several outputs in order, e.g. across noise replicates.
    pub fn concat(parts: Vec<SampleOutput>) -> Result<SampleOutput> {
        let mut it = parts.into_iter();
        let mut first = it.next().ok_or_else(|| Error::Input("nothing to pool".into()))?;
        for p in it {
            let offset = first.diagnostics.chains;
            for r in p.samples.iter_rows() {
                first.samples.push_row(r)?;
            }
            first.chain.extend(p.chain.iter().map(|c| c + offset));
            first.stage.extend(p.stage);
            first.diagnostics.chains += p.diagnostics.chains;
            first.diagnostics.steps += p.diagnostics.steps;
            first.diagnostics.failed_chains.extend(p.diagnostics.failed_chains.into_iter().map(|(c, m)| (c + offset, m)));
        }
        Ok(first)
    }
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Runs all chains through the tempering ladder and pools the kept draws.
#[allow(clippy::too_many_arguments)]
pub fn run_sampler(
    score: &mut dyn ScoreModel,
    data: &Matrix,
    prior: &PriorSpec,
    support: &Support,
    init: &InitDistribution,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let d = prior.dim();
    let tau = match (cfg.step_size, init) {
        (Some(t), _) => t,
        (None, InitDistribution::Proposal { proposal }) => step_from_proposal(proposal),
        (None, _) => return Err(Error::Config("step size needs a proposal or an explicit value".into())),
    };
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("step size {tau} must be positive")));
    }
    let clip = cfg.clip.resolve(data.rows, d)?;
    let burn = cfg.burn_steps();
    let last = cfg.ladder.len() - 1;
    let mut samples = Matrix::zeros(0, d);
    let mut chain_ids = Vec::new();
    let mut stages = Vec::new();
    let mut diag = SamplerDiagnostics { chains: cfg.chains, step_size: tau, clip_bound: clip, ..Default::default() };
    let (mut reflections, mut clips, mut steps) = (0usize, 0usize, 0usize);
    let mut norms = Vec::new();

    for c in 0..cfg.chains {
        let chain_seed = derive_index_seed(seed, c as u64);
        let mut rng = rng_from_seed(chain_seed);
        let mut theta = init.draw(prior, &mut rng);
        if theta.len() != d {
            return Err(Error::dim("initial theta", d, theta.len()));
        }
        support.fold(&mut theta);
        let mut state = ChainState { theta, step: 0, seed: chain_seed, beta: cfg.ladder[0] };
        let mut kept = Matrix::zeros(0, d);
        let mut kept_stage = Vec::new();
        let mut failure = None;
        'stages: for (l, &beta) in cfg.ladder.iter().enumerate() {
            state.beta = beta;
            for k in 0..cfg.steps_per_stage {
                match lmc_step(&mut state, score, data, prior, support, tau, clip, &mut rng) {
                    Ok(info) => {
                        steps += 1;
                        reflections += info.reflected as usize;
                        clips += info.clipped as usize;
                        norms.push(info.drift_norm);
                    }
                    Err(e) => {
                        failure = Some(format!("stage {l} step {k}: {e}"));
                        break 'stages;
                    }
                }
                if (cfg.emit_all_stages || l == last) && k >= burn && (k - burn) % cfg.thin == 0 {
                    kept.push_row(&state.theta)?;
                    kept_stage.push(l);
                }
            }
        }
        match failure {
            Some(msg) => diag.failed_chains.push((c, msg)),
            None => {
                for r in kept.iter_rows() {
                    samples.push_row(r)?;
                }
                chain_ids.extend(std::iter::repeat_n(c, kept_stage.len()));
                stages.extend(kept_stage);
            }
        }
    }
    if 2 * diag.failed_chains.len() > cfg.chains {
        let first = diag.failed_chains.first().map(|(c, m)| format!("chain {c}: {m}")).unwrap_or_default();
        return Err(Error::Sampler(format!("{} of {} chains failed; {first}", diag.failed_chains.len(), cfg.chains)));
    }
    diag.steps = steps;
    diag.reflection_rate = reflections as f64 / steps.max(1) as f64;
    diag.clip_rate = clips as f64 / steps.max(1) as f64;
    norms.sort_by(f64::total_cmp);
    diag.drift_norm_quantiles = [0.05, 0.25, 0.5, 0.75, 0.95].iter().map(|q| quantile_sorted(&norms, *q)).collect();
    Ok(SampleOutput { samples, chain: chain_ids, stage: stages, diagnostics: diag })
}
