use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{AbcConfig, GibbsConfig};
use crate::langevin::SamplerConfig;
use crate::localization::LocalizationConfig;
use crate::rng::derive_seed;
use crate::scorematch::{BoundaryTreatment, DataUpperBound, TableSizes, TrainConfig};
use crate::simulators::{Model, PriorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single-observation training with the curvature penalty and the mean
    /// correction.
    SingleDebiased,
    /// Training on full datasets of `n` observations.
    NModel,
    /// Single-observation training with the plain implicit loss.
    Naive,
}

/// Where the observed dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservedSource {
    /// `n` rows simulated at `theta`.
    Simulate { theta: Vec<f64>, n: usize },
    /// `y = tanh(4x + 2) + sigma eps` with the model's noise level.
    TanhCurve { n: usize },
    /// A CSV file with a header row and one observation per line.
    Csv { path: PathBuf },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    #[default]
    Trained,
    /// The model's closed-form score replaces training.
    Analytic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    #[default]
    None,
    /// Exact draws from the conjugate Gaussian posterior restricted to the
    /// prior box (`gaussian_location` with a uniform prior).
    GaussianConjugate { draws: usize },
    /// Gibbs draws from the truncated Gaussian regression posterior
    /// (`bernstein_monotone`).
    TruncatedNormal { gibbs: GibbsConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Truth for bias and coverage; defaults to the simulating parameter.
    pub theta_star: Option<Vec<f64>>,
    pub levels: (f64, f64),
    pub reference: ReferenceSpec,
    pub abc: Option<AbcConfig>,
    /// Parameter rows used for the score-loss summary; 0 disables it.
    pub score_loss_rows: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { theta_star: None, levels: (0.025, 0.975), reference: ReferenceSpec::None, abc: None, score_loss_rows: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: Model,
    /// Defaults to the model's own prior.
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    pub variant: Variant,
    #[serde(default)]
    pub boundary: BoundaryTreatment,
    /// Data-dependent upper bound on one coordinate, used by weight
    /// functions and by the sampler's support.
    #[serde(default)]
    pub data_upper: Option<DataUpperBound>,
    /// Distance from a face at which the weight function reaches 1; `None`
    /// scales by the half-width of each coordinate's range.
    #[serde(default)]
    pub weight_ramp: Option<f64>,
    pub observed: ObservedSource,
    /// `None` disables localization; tables are then drawn from the prior.
    #[serde(default)]
    pub localization: Option<LocalizationConfig>,
    #[serde(default)]
    pub tables: TableSizes,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub score: ScoreSource,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub seed: u64,
    /// Per-stage seed replacements keyed by stage name.
    #[serde(default)]
    pub seed_overrides: BTreeMap<String, u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn prior(&self) -> PriorSpec {
        self.prior.clone().unwrap_or_else(|| self.model.default_prior())
    }

    /// The seed of a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        self.seed_overrides.get(stage).copied().unwrap_or_else(|| derive_seed(self.seed, stage))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let prior = self.prior();
        prior.validate()?;
        let d = self.model.theta_dim();
        if prior.dim() != d {
            return Err(Error::dim("prior dimension", d, prior.dim()));
        }
        match &self.observed {
            ObservedSource::Simulate { theta, n } => {
                if theta.len() != d {
                    return Err(Error::dim("observed theta", d, theta.len()));
                }
                if *n == 0 {
                    return Err(Error::Config("observed data needs at least one row".into()));
                }
            }
            ObservedSource::TanhCurve { n } => {
                if !matches!(self.model, Model::BernsteinMonotone { .. }) {
                    return Err(Error::Config("the tanh curve needs the bernstein_monotone model".into()));
                }
                if *n == 0 {
                    return Err(Error::Config("observed data needs at least one row".into()));
                }
            }
            ObservedSource::Csv { .. } => {}
        }
        if let Some(u) = &self.data_upper {
            if u.coord >= d {
                return Err(Error::Config(format!("data bound on coordinate {} of {d}", u.coord)));
            }
        }
        if let Some(r) = self.weight_ramp {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("weight ramp must be positive, got {r}")));
            }
        }
        if let Some(t) = &self.evaluation.theta_star {
            if t.len() != d {
                return Err(Error::dim("theta*", d, t.len()));
            }
        }
        let (lo, hi) = self.evaluation.levels;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("credible levels ({lo}, {hi}) are not ordered in [0, 1]")));
        }
        self.sampler.validate()?;
        if let BoundaryTreatment::GaussianSmoothing { sigma, replicates } = &self.boundary {
            if *replicates == 0 {
                return Err(Error::Config("smoothing needs at least one noise replicate".into()));
            }
            if let Some(s) = sigma {
                if !(*s > 0.0 && s.is_finite()) {
                    return Err(Error::Config(format!("smoothing scale {s} must be positive")));
                }
            }
        }
        if self.score == ScoreSource::Analytic {
            if self.model.analytic_score(&vec![0.5; d], &vec![0.5; self.model.data_dim()]).is_none() {
                return Err(Error::Config(format!("{} has no analytic score", self.model.name())));
            }
            return Ok(());
        }
        let t = &self.tables;
        match self.variant {
            Variant::SingleDebiased => {
                if t.single < 2 || t.regression < 2 || t.regression_draws < 2 {
                    return Err(Error::Config(
                        "single_debiased needs tables.single >= 2, tables.regression >= 2 and tables.regression_draws >= 2".into(),
                    ));
                }
            }
            Variant::Naive => {
                if t.single < 2 {
                    return Err(Error::Config("naive needs tables.single >= 2".into()));
                }
            }
            Variant::NModel => {
                if t.full < 2 {
                    return Err(Error::Config("n_model needs tables.full >= 2".into()));
                }
            }
        }
        Ok(())
    }
}
