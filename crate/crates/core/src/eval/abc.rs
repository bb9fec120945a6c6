use serde::{Deserialize, Serialize};

use crate::discrepancy::{DirectionSet, SlicedTarget, DEFAULT_DIRECTIONS};
use crate::error::{Error, Result};
use crate::localization::Proposal;
use crate::rng::{derive_index_seed, derive_seed, row_rng};
use crate::simulators::{Dataset, Matrix, Model, PriorSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbcConfig {
    pub draws: usize,
    pub keep_fraction: f64,
    pub directions: usize,
}

impl Default for AbcConfig {
    fn default() -> Self {
        Self { draws: 20_000, keep_fraction: 0.01, directions: DEFAULT_DIRECTIONS }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AbcSource<'a> {
    Prior,
    Proposal(&'a Proposal),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbcResult {
    pub theta: Matrix,
    /// Normalized importance weights `pi / q`; uniform for prior draws.
    pub weights: Vec<f64>,
    pub distances: Vec<f64>,
    /// Indices of the kept draws in generation order.
    pub indices: Vec<usize>,
    pub simulator_calls: u64,
}

/// Indices of the `ceil(keep * N)` smallest distances, ties by index.
pub fn abc_select(distances: &[f64], keep_fraction: f64) -> Result<Vec<usize>> {
    if distances.is_empty() {
        return Err(Error::Input("no ABC draws".into()));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let keep = ((keep_fraction * distances.len() as f64).ceil() as usize).clamp(1, distances.len());
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(idx)
}

fn draw_theta(model: &Model, prior: &PriorSpec, source: &AbcSource, seed: u64, k: usize) -> Result<Vec<f64>> {
    let mut rng = row_rng(seed, k as u64);
    for _ in 0..100_000 {
        let t = match source {
            AbcSource::Prior => prior.sample(&mut rng),
            AbcSource::Proposal(q) => q.sample(&mut rng),
        };
        if prior.contains(&t) && model.check_theta(&t).is_ok() {
            return Ok(t);
        }
    }
    Err(Error::Config("ABC sampling distribution rarely hits the prior support".into()))
}

/// Rejection ABC with the sliced Wasserstein distance.
pub fn abc_baseline(
    model: &Model,
    prior: &PriorSpec,
    source: AbcSource,
    x_star: &Dataset,
    cfg: &AbcConfig,
    seed: u64,
) -> Result<AbcResult> {
    if cfg.draws == 0 {
        return Err(Error::Input("ABC needs at least one draw".into()));
    }
    let n = x_star.rows;
    let dirs = DirectionSet::random(cfg.directions, model.data_dim(), derive_seed(seed, "directions"));
    let target = SlicedTarget::new(x_star, dirs)?;
    let theta_seed = derive_seed(seed, "theta");
    let latent_seed = derive_seed(seed, "latents");
    let mut thetas = Matrix::zeros(0, prior.dim());
    let mut distances = Vec::with_capacity(cfg.draws);
    for k in 0..cfg.draws {
        let t = draw_theta(model, prior, &source, theta_seed, k)?;
        let z = model.draw_latents(n, derive_index_seed(latent_seed, k as u64));
        let x = model.simulate(&t, &z)?;
        distances.push(target.distance(&x)?);
        thetas.push_row(&t)?;
    }
    let indices = abc_select(&distances, cfg.keep_fraction)?;
    let mut theta = Matrix::zeros(0, prior.dim());
    let mut raw = Vec::with_capacity(indices.len());
    for &i in &indices {
        let t = thetas.row(i);
        theta.push_row(t)?;
        raw.push(match source {
            AbcSource::Prior => 1.0,
            AbcSource::Proposal(q) => (prior.log_density(t) - q.log_density(t)).exp(),
        });
    }
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    Ok(AbcResult {
        theta,
        weights,
        distances: indices.iter().map(|&i| distances[i]).collect(),
        indices,
        simulator_calls: cfg.draws as u64,
    })
}
