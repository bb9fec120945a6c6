use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ObservedSource, ReferenceSpec, ScoreSource, Variant};
use crate::error::{Error, Result};
use crate::eval::{
    abc_baseline, bernstein_gaussian_posterior, distribution_distances, posterior_metrics, predictive_comparison, score_loss_triptych,
    truncated_normal, truncated_normal_reference, AbcSource, MetricReport, ScoreLosses,
};
use crate::langevin::{run_sampler, AnalyticScore, InitDistribution, SampleOutput, SamplerDiagnostics, ScoreModel, Support};
use crate::localization::{build_proposal, localize, Proposal};
use crate::rng::{derive_index_seed, derive_seed, rng_from_seed};
use crate::scorematch::{
    build_reference_tables, gaussian_smooth, smooth_matrix, train_full, train_single, BoundaryTreatment, BoxDistanceWeight, OutputScale, WeightFn,
    ReferenceTable, ThetaSource, TrainedScore, TrainingMeta,
};
use crate::simulators::{bernstein_basis, queue_natural_params, tanh_regression_data, tanh_truth, Dataset, Matrix, Model, PriorComponent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Localization,
    Tables,
    Training,
    Sampling,
    Evaluation,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Data, Stage::Localization, Stage::Tables, Stage::Training, Stage::Sampling, Stage::Evaluation];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Localization => "localization",
            Stage::Tables => "tables",
            Stage::Training => "training",
            Stage::Sampling => "sampling",
            Stage::Evaluation => "evaluation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seed: u64,
    pub status: StageStatus,
    /// Localization counts simulated datasets; tables count simulated
    /// observations.
    pub simulator_calls: u64,
    pub outputs: Vec<String>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub variant: Variant,
    pub master_seed: u64,
    pub stages: Vec<StageRecord>,
    /// Localization plus table simulations.
    pub simulator_calls: u64,
    /// Simulations spent on evaluation baselines.
    pub evaluation_simulator_calls: u64,
}

impl Manifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            model: cfg.model.name().into(),
            variant: cfg.variant,
            master_seed: cfg.seed,
            stages: Vec::new(),
            simulator_calls: 0,
            evaluation_simulator_calls: 0,
        }
    }

    fn record(&mut self, rec: StageRecord) {
        self.stages.retain(|r| r.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|r| Stage::ALL.iter().position(|s| *s == r.stage));
        let calls = |s: Stage| self.stages.iter().filter(|r| r.stage == s).map(|r| r.simulator_calls).sum::<u64>();
        self.simulator_calls = calls(Stage::Localization) + calls(Stage::Tables);
        self.evaluation_simulator_calls = calls(Stage::Evaluation);
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.path("manifest.json")
    }
    pub fn observed(&self) -> PathBuf {
        self.path("observed.csv")
    }
    pub fn pool(&self) -> PathBuf {
        self.path("pool.json")
    }
    pub fn proposal(&self) -> PathBuf {
        self.path("proposal.json")
    }
    pub fn table(&self, which: &str) -> PathBuf {
        self.root.join("tables").join(format!("{which}.bin"))
    }
    pub fn score(&self) -> PathBuf {
        self.path("score")
    }
    pub fn samples(&self) -> PathBuf {
        self.path("samples.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.path("metrics.json")
    }

    fn require(&self, p: PathBuf) -> Result<PathBuf> {
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p.display().to_string()))
        }
    }

    pub fn load_observed(&self) -> Result<Dataset> {
        let p = self.require(self.observed())?;
        Ok(Matrix::from_csv(&std::fs::read_to_string(p)?)?.1)
    }

    pub fn load_proposal(&self) -> Result<Proposal> {
        let p = self.require(self.proposal())?;
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    pub fn load_table(&self, which: &str) -> Result<ReferenceTable> {
        ReferenceTable::load(&self.require(self.table(which))?)
    }

    /// Posterior draws without the chain and stage columns, and the chain ids.
    pub fn load_samples(&self, d: usize) -> Result<(Matrix, Vec<usize>)> {
        let p = self.require(self.samples())?;
        let (header, m) = Matrix::from_csv(&std::fs::read_to_string(p)?)?;
        if header.len() != d + 2 {
            return Err(Error::dim("samples.csv columns", d + 2, header.len()));
        }
        let mut out = Matrix::zeros(m.rows, d);
        let mut chains = Vec::with_capacity(m.rows);
        for (i, r) in m.iter_rows().enumerate() {
            out.row_mut(i).copy_from_slice(&r[..d]);
            chains.push(r[d] as usize);
        }
        Ok((out, chains))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

struct StageOutcome {
    status: StageStatus,
    calls: u64,
    outputs: Vec<String>,
    note: Option<String>,
}

impl StageOutcome {
    fn ok(calls: u64, outputs: &[&str]) -> Self {
        Self { status: StageStatus::Ok, calls, outputs: outputs.iter().map(|s| s.to_string()).collect(), note: None }
    }

    fn skipped(note: &str) -> Self {
        Self { status: StageStatus::Skipped, calls: 0, outputs: Vec::new(), note: Some(note.into()) }
    }

    fn with_note(mut self, note: Option<String>) -> Self {
        self.note = note;
        self
    }
}

/// Runs one stage against `dir`, reading earlier stages' outputs from disk,
/// and records it in the manifest. Failures are wrapped with the stage name.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage, dir: &RunDir) -> Result<StageRecord> {
    std::fs::create_dir_all(&dir.root)?;
    let seed = cfg.stage_seed(stage.name());
    let result = match stage {
        Stage::Data => stage_data(cfg, dir, seed),
        Stage::Localization => stage_localization(cfg, dir, seed),
        Stage::Tables => stage_tables(cfg, dir, seed),
        Stage::Training => stage_training(cfg, dir, seed),
        Stage::Sampling => stage_sampling(cfg, dir, seed),
        Stage::Evaluation => stage_evaluation(cfg, dir, seed),
    };
    let mut manifest = Manifest::load(&dir.manifest()).unwrap_or_else(|_| Manifest::new(cfg));
    let (rec, err) = match result {
        Ok(o) => (StageRecord { stage, seed, status: o.status, simulator_calls: o.calls, outputs: o.outputs, note: o.note }, None),
        Err(e) => (
            StageRecord { stage, seed, status: StageStatus::Failed, simulator_calls: 0, outputs: Vec::new(), note: Some(e.to_string()) },
            Some(e),
        ),
    };
    manifest.record(rec.clone());
    write_json(&dir.manifest(), &manifest)?;
    match err {
        Some(e) => Err(Error::Stage { stage: stage.name().into(), source: Box::new(e) }),
        None => Ok(rec),
    }
}

/// Every stage in order into `cfg.output_dir`. Outputs of finished stages
/// stay on disk when a later stage fails.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.output_dir);
    std::fs::create_dir_all(&dir.root)?;
    let _ = std::fs::remove_file(dir.manifest());
    write_text(&dir.config(), &cfg.to_json()?)?;
    for stage in Stage::ALL {
        run_stage(cfg, stage, &dir)?;
    }
    Ok(dir.root)
}

fn observed_data(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let model = &cfg.model;
    let x = match &cfg.observed {
        ObservedSource::Simulate { theta, n } => model.simulate(theta, &model.draw_latents(*n, seed))?,
        ObservedSource::TanhCurve { n } => {
            let Model::BernsteinMonotone { sigma, .. } = *model else {
                return Err(Error::Config("the tanh curve needs the bernstein_monotone model".into()));
            };
            tanh_regression_data(*n, sigma, seed)
        }
        ObservedSource::Csv { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
            Matrix::from_csv(&text)?.1
        }
    };
    if x.cols != model.data_dim() {
        return Err(Error::dim("observed columns", model.data_dim(), x.cols));
    }
    if x.rows == 0 {
        return Err(Error::Input("observed data is empty".into()));
    }
    Ok(x)
}

fn stage_data(cfg: &ExperimentConfig, dir: &RunDir, seed: u64) -> Result<StageOutcome> {
    let x = observed_data(cfg, seed)?;
    write_text(&dir.observed(), &x.to_csv(&cfg.model.data_columns())?)?;
    Ok(StageOutcome::ok(0, &["observed.csv"]))
}

fn stage_localization(cfg: &ExperimentConfig, dir: &RunDir, seed: u64) -> Result<StageOutcome> {
    let Some(lcfg) = &cfg.localization else {
        return Ok(StageOutcome::skipped("localization disabled; tables use the prior"));
    };
    let x = dir.load_observed()?;
    let pool = localize(&cfg.model, &cfg.prior(), &x, lcfg, seed)?;
    write_json(&dir.pool(), &pool)?;
    let mut q = build_proposal(&pool, lcfg.inflation, lcfg.variance_floor)?;
    if let Some(v) = lcfg.min_variance {
        q = q.with_min_variance(v)?;
    }
    write_json(&dir.proposal(), &q)?;
    let failed = pool.members.iter().filter(|m| m.theta.is_none()).count();
    let note = (failed > 0).then(|| format!("{failed} of {} estimates failed", pool.members.len()));
    Ok(StageOutcome::ok(pool.simulator_calls, &["pool.json", "proposal.json"]).with_note(note))
}

/// Noise scale of Gaussian smoothing: the configured value or 0.05 times the
/// pooled standard deviation of the observed data.
pub fn smoothing_sigma(cfg: &ExperimentConfig, observed: &Dataset) -> Option<f64> {
    match &cfg.boundary {
        BoundaryTreatment::GaussianSmoothing { sigma: Some(s), .. } => Some(*s),
        BoundaryTreatment::GaussianSmoothing { sigma: None, .. } => {
            let sds = observed.column_sds();
            Some(0.05 * (sds.iter().map(|s| s * s).sum::<f64>() / sds.len() as f64).sqrt())
        }
        _ => None,
    }
}

const TABLE_NAMES: [&str; 3] = ["single", "regression", "full"];

fn stage_tables(cfg: &ExperimentConfig, dir: &RunDir, seed: u64) -> Result<StageOutcome> {
    let x = dir.load_observed()?;
    let mut sizes = cfg.tables;
    match cfg.variant {
        Variant::Naive => {
            (sizes.regression, sizes.full) = (0, 0);
        }
        Variant::SingleDebiased => sizes.full = 0,
        Variant::NModel => {
            (sizes.single, sizes.regression) = (0, 0);
            if sizes.full_n == 0 {
                sizes.full_n = x.rows;
            }
        }
    }
    if sizes.single == 0 && sizes.regression == 0 && sizes.full == 0 {
        return Ok(StageOutcome::skipped("no tables requested"));
    }
    let source = match cfg.localization {
        Some(_) => ThetaSource::Proposal(dir.load_proposal()?),
        None => ThetaSource::Prior,
    };
    let tables = build_reference_tables(&cfg.model, &cfg.prior(), &source, &sizes, seed)?;
    let sigma = smoothing_sigma(cfg, &x);
    let mut outputs = Vec::new();
    for (name, t) in TABLE_NAMES.iter().zip([&tables.single, &tables.regression, &tables.full]) {
        if t.is_empty() {
            let _ = std::fs::remove_file(dir.table(name));
            continue;
        }
        let t = match sigma {
            Some(s) => gaussian_smooth(t, s, derive_seed(seed, &format!("smooth-{name}")))?,
            None => t.clone(),
        };
        std::fs::create_dir_all(dir.root.join("tables"))?;
        t.save(&dir.table(name))?;
        outputs.push(format!("tables/{name}.bin"));
    }
    Ok(StageOutcome {
        status: StageStatus::Ok,
        calls: tables.simulator_calls,
        outputs,
        note: sigma.map(|s| format!("smoothing scale {s}")),
    })
}

fn resolve_scale(scale: &OutputScale, q: Option<&Proposal>, per_obs: Option<usize>) -> Result<OutputScale> {
    match scale {
        OutputScale::FromProposal => {
            let q = q.ok_or_else(|| Error::Config("output scale `from_proposal` needs localization".into()))?;
            let k = per_obs.map_or(1.0, |n| (n as f64).sqrt());
            Ok(OutputScale::PerCoordinate { values: q.sd().iter().map(|s| 1.0 / (s * k)).collect() })
        }
        other => Ok(other.clone()),
    }
}

fn stage_training(cfg: &ExperimentConfig, dir: &RunDir, seed: u64) -> Result<StageOutcome> {
    if cfg.score == ScoreSource::Analytic {
        return Ok(StageOutcome::skipped("analytic score in place of training"));
    }
    let x = dir.load_observed()?;
    let q = match cfg.localization {
        Some(_) => Some(dir.load_proposal()?),
        None => None,
    };
    let prior = cfg.prior();
    let mut tcfg = cfg.training.clone();
    let per_obs = (cfg.variant != Variant::NModel).then_some(x.rows);
    tcfg.network.output_scale = resolve_scale(&tcfg.network.output_scale, q.as_ref(), per_obs)?;
    if let Some(d) = &mut tcfg.debias {
        if d.network.output_scale == OutputScale::FromProposal {
            d.network.output_scale = OutputScale::Fixed { value: 1.0 };
        }
    }
    let weight = match cfg.boundary {
        BoundaryTreatment::WeightFunction => {
            let w = BoxDistanceWeight::from_prior(&prior, cfg.data_upper.clone());
            Some(match cfg.weight_ramp {
                Some(r) => w.with_ramp(r)?,
                None => w,
            })
        }
        _ => None,
    };
    let weight = weight.as_ref().map(|w| w as &dyn WeightFn);
    let trained = match cfg.variant {
        Variant::Naive => {
            tcfg.optim.lambda_grid = vec![0.0];
            tcfg.debias = None;
            train_single(&dir.load_table("single")?, None, Some(&prior), weight, &tcfg, seed)?
        }
        Variant::SingleDebiased => {
            let single = dir.load_table("single")?;
            let reg = dir.load_table("regression")?;
            train_single(&single, Some(&reg), Some(&prior), weight, &tcfg, seed)?
        }
        Variant::NModel => train_full(&dir.load_table("full")?, weight, &tcfg, seed)?,
    };
    trained.save(&dir.score())?;
    let note = trained.meta.debias_note.clone();
    Ok(StageOutcome::ok(0, &["score/score.weights", "score/training.json"]).with_note(note))
}

/// The sampler's support: the prior box, tightened by the data bound.
pub fn sampler_support(cfg: &ExperimentConfig, observed: &Dataset) -> Result<Support> {
    let s = Support::from_prior(&cfg.prior());
    match &cfg.data_upper {
        Some(u) => s.with_data_bound(u, observed),
        None => Ok(s),
    }
}

fn stage_sampling(cfg: &ExperimentConfig, dir: &RunDir, seed: u64) -> Result<StageOutcome> {
    let x = dir.load_observed()?;
    let prior = cfg.prior();
    let init = match cfg.localization {
        Some(_) => InitDistribution::Proposal { proposal: dir.load_proposal()? },
        None => InitDistribution::Prior,
    };
    let support = sampler_support(cfg, &x)?;
    let trained = match cfg.score {
        ScoreSource::Trained => Some(TrainedScore::load(&dir.score())?),
        ScoreSource::Analytic => None,
    };
    let mut analytic = AnalyticScore(&cfg.model);
    let mut evaluator = trained.as_ref().map(TrainedScore::evaluator).transpose()?;
    let score: &mut dyn ScoreModel = match &mut evaluator {
        Some(e) => e,
        None => &mut analytic,
    };
    let out = match cfg.boundary {
        BoundaryTreatment::GaussianSmoothing { replicates, .. } => {
            let sigma = smoothing_sigma(cfg, &x).unwrap_or(0.0);
            let mut parts = Vec::with_capacity(replicates);
            for r in 0..replicates as u64 {
                let mut noisy = x.clone();
                smooth_matrix(&mut noisy, sigma, derive_index_seed(derive_seed(seed, "noise"), r));
                let chain_seed = derive_index_seed(derive_seed(seed, "chains"), r);
                parts.push(run_sampler(score, &noisy, &prior, &support, &init, &cfg.sampler, chain_seed)?);
            }
            SampleOutput::concat(parts)?
        }
        _ => run_sampler(score, &x, &prior, &support, &init, &cfg.sampler, seed)?,
    };
    write_text(&dir.samples(), &out.to_csv(&cfg.model.theta_columns())?)?;
    write_json(&dir.path("sampler.json"), &out.diagnostics)?;
    let note = (!out.diagnostics.failed_chains.is_empty())
        .then(|| format!("{} of {} chains failed", out.diagnostics.failed_chains.len(), out.diagnostics.chains));
    Ok(StageOutcome::ok(0, &["samples.csv", "sampler.json"]).with_note(note))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Standard error of the mean from the spread of per-chain means.
    pub chain_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub kind: String,
    pub draws: usize,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub ks: Vec<f64>,
    pub w1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub average_ks: f64,
    pub average_w1: f64,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub draws: usize,
    pub summary: Vec<CoordSummary>,
    /// Bias, interval and coverage against `theta*`.
    pub posterior: Option<MetricReport>,
    /// The same in `(theta1, theta2, theta3)` for the queue.
    pub posterior_natural: Option<MetricReport>,
    pub reference: Option<ReferenceComparison>,
    pub predictive: Option<PredictiveSummary>,
    pub abc: Option<MetricReport>,
    pub score_losses: Option<ScoreLosses>,
    pub score_losses_without_debias: Option<ScoreLosses>,
    pub sampler: Option<SamplerDiagnostics>,
    pub training: Option<TrainingMeta>,
}

fn summarize(samples: &Matrix, chains: &[usize], names: &[String]) -> Vec<CoordSummary> {
    let n_chains = chains.iter().max().map_or(0, |c| c + 1);
    (0..samples.cols)
        .map(|j| {
            let col = samples.column(j);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            let mut sums = vec![(0.0, 0usize); n_chains];
            for (v, &c) in col.iter().zip(chains) {
                sums[c].0 += v;
                sums[c].1 += 1;
            }
            let means: Vec<f64> = sums.iter().filter(|s| s.1 > 0).map(|s| s.0 / s.1 as f64).collect();
            let k = means.len() as f64;
            let chain_se = if means.len() > 1 {
                let m = means.iter().sum::<f64>() / k;
                (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
            } else {
                f64::NAN
            };
            CoordSummary { name: names[j].clone(), mean, sd, chain_se }
        })
        .collect()
}

fn theta_star(cfg: &ExperimentConfig) -> Option<Vec<f64>> {
    cfg.evaluation.theta_star.clone().or_else(|| match &cfg.observed {
        ObservedSource::Simulate { theta, .. } => Some(theta.clone()),
        _ => None,
    })
}

/// Draws from the reference posterior, with a label.
fn reference_draws(cfg: &ExperimentConfig, x: &Dataset, seed: u64) -> Result<Option<(String, Matrix)>> {
    let prior = cfg.prior();
    match &cfg.evaluation.reference {
        ReferenceSpec::None => Ok(None),
        ReferenceSpec::GaussianConjugate { draws } => {
            let Model::GaussianLocation { sigma, .. } = cfg.model else {
                return Err(Error::Config("the conjugate reference needs gaussian_location".into()));
            };
            if !prior.is_flat() {
                return Err(Error::Config("the conjugate reference needs a uniform prior".into()));
            }
            let sd = sigma / (x.rows as f64).sqrt();
            let mean = x.column_means();
            let bounds = prior.bounds();
            let mut rng = rng_from_seed(seed);
            let mut m = Matrix::zeros(*draws, mean.len());
            for i in 0..*draws {
                for (j, v) in m.row_mut(i).iter_mut().enumerate() {
                    let u: f64 = rng.random();
                    *v = truncated_normal(mean[j], sd, bounds[j].0, bounds[j].1, u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
                }
            }
            Ok(Some(("gaussian_conjugate".into(), m)))
        }
        ReferenceSpec::TruncatedNormal { gibbs } => {
            let (mean, cov) = bernstein_gaussian_posterior(&cfg.model, x)?;
            if prior.components.iter().any(|c| !matches!(c, PriorComponent::Uniform { .. })) {
                return Err(Error::Config("the truncated normal reference needs a uniform prior".into()));
            }
            let m = truncated_normal_reference(&mean, &cov, &prior.bounds(), gibbs, seed)?;
            Ok(Some(("truncated_normal".into(), m)))
        }
    }
}

fn stage_evaluation(cfg: &ExperimentConfig, dir: &RunDir, seed: u64) -> Result<StageOutcome> {
    let model = &cfg.model;
    let d = model.theta_dim();
    let names = model.theta_columns();
    let x = dir.load_observed()?;
    let (samples, chains) = dir.load_samples(d)?;
    if samples.rows == 0 {
        return Err(Error::Input("no posterior samples".into()));
    }
    let star = theta_star(cfg);
    let levels = cfg.evaluation.levels;
    let mut outputs = vec!["metrics.json".to_string()];
    let mut calls = 0;

    let posterior = match &star {
        Some(t) => Some(posterior_metrics(&samples, t, &names, levels, None)?),
        None => None,
    };
    let posterior_natural = match (&star, model) {
        (Some(t), Model::Mg1Queue { .. }) => {
            let mut nat = Matrix::zeros(0, 3);
            for r in samples.iter_rows() {
                nat.push_row(&queue_natural_params(r))?;
            }
            Some(posterior_metrics(&nat, &queue_natural_params(t), &names, levels, None)?)
        }
        _ => None,
    };
    if let Some(p) = &posterior {
        write_text(&dir.path("metrics.csv"), &p.to_csv())?;
        outputs.push("metrics.csv".into());
    }

    let mut reference = None;
    let mut predictive = None;
    if let Some((kind, refs)) = reference_draws(cfg, &x, derive_seed(seed, "reference"))? {
        write_text(&dir.path("reference.csv"), &refs.to_csv(&names)?)?;
        outputs.push("reference.csv".into());
        let mut ks = Vec::with_capacity(d);
        let mut w1 = Vec::with_capacity(d);
        for j in 0..d {
            let (a, b) = distribution_distances(&samples.column(j), &refs.column(j))?;
            ks.push(a);
            w1.push(b);
        }
        let summary = summarize(&refs, &vec![0; refs.rows], &names);
        if let Model::BernsteinMonotone { order, .. } = *model {
            let truth: Box<dyn Fn(f64) -> f64> = match (&cfg.observed, &star) {
                (ObservedSource::TanhCurve { .. }, _) => Box::new(tanh_truth),
                (_, Some(t)) => {
                    let t = t.clone();
                    Box::new(move |x| bernstein_basis(order, x).map(|b| b.iter().zip(&t).map(|(a, c)| a * c).sum()).unwrap_or(f64::NAN))
                }
                _ => Box::new(|_| f64::NAN),
            };
            let rep = predictive_comparison(&samples, &refs, order, &*truth)?;
            let mut csv = String::from("x,ks,w1,lower,upper,truth,covers\n");
            for p in &rep.points {
                csv.push_str(&format!("{},{},{},{},{},{},{}\n", p.x, p.ks, p.w1, p.lower, p.upper, p.truth, p.covers as u8));
            }
            write_text(&dir.path("predictive.csv"), &csv)?;
            outputs.push("predictive.csv".into());
            predictive = Some(PredictiveSummary { average_ks: rep.average_ks, average_w1: rep.average_w1, coverage: rep.coverage });
        }
        reference = Some(ReferenceComparison {
            kind,
            draws: refs.rows,
            mean: summary.iter().map(|s| s.mean).collect(),
            sd: summary.iter().map(|s| s.sd).collect(),
            ks,
            w1,
        });
    }

    let abc = match (&cfg.evaluation.abc, &star) {
        (Some(acfg), Some(t)) => {
            let q = match cfg.localization {
                Some(_) => Some(dir.load_proposal()?),
                None => None,
            };
            let source = q.as_ref().map_or(AbcSource::Prior, AbcSource::Proposal);
            let r = abc_baseline(model, &cfg.prior(), source, &x, acfg, derive_seed(seed, "abc"))?;
            calls += r.simulator_calls;
            let mut csv_rows = Matrix::zeros(0, d + 1);
            for (row, w) in r.theta.iter_rows().zip(&r.weights) {
                let mut v = row.to_vec();
                v.push(*w);
                csv_rows.push_row(&v)?;
            }
            let mut header = names.clone();
            header.push("weight".into());
            write_text(&dir.path("abc.csv"), &csv_rows.to_csv(&header)?)?;
            outputs.push("abc.csv".into());
            Some(posterior_metrics(&r.theta, t, &names, levels, Some(&r.weights))?)
        }
        _ => None,
    };

    let trained = match cfg.score {
        ScoreSource::Trained => Some(TrainedScore::load(&dir.score())?),
        ScoreSource::Analytic => None,
    };
    let (mut score_losses, mut score_losses_without_debias) = (None, None);
    let k = cfg.evaluation.score_loss_rows;
    let has_oracle = model.analytic_score(&vec![0.5; d], &vec![0.5; model.data_dim()]).is_some();
    if let (Some(ts), true, true) = (&trained, k > 0, has_oracle) {
        let table = ["single", "full"].iter().find_map(|w| dir.load_table(w).ok()).ok_or_else(|| Error::MissingArtifact("tables".into()))?;
        let rows = k.min(table.groups());
        let table_theta = table.theta.slice_rows(0, rows);
        let stride = (samples.rows / k).max(1);
        let mut post = Matrix::zeros(0, d);
        for i in (0..samples.rows).step_by(stride).take(k) {
            post.push_row(samples.row(i))?;
        }
        let losses = |t: &TrainedScore| -> Result<ScoreLosses> {
            let mut ev = t.evaluator()?;
            let mut f = |th: &[f64], xr: &[f64]| ev.single(th, xr);
            score_loss_triptych(&mut f, model, &table_theta, Some(&post), x.rows, derive_seed(seed, "score-losses"))
        };
        score_losses = Some(losses(ts)?);
        if ts.debiased() {
            score_losses_without_debias = Some(losses(&ts.without_debias())?);
        }
    }

    let sampler = std::fs::read_to_string(dir.path("sampler.json")).ok().and_then(|t| serde_json::from_str(&t).ok());
    let metrics = RunMetrics {
        draws: samples.rows,
        summary: summarize(&samples, &chains, &names),
        posterior,
        posterior_natural,
        reference,
        predictive,
        abc,
        score_losses,
        score_losses_without_debias,
        sampler,
        training: trained.map(|t| t.meta),
    };
    write_json(&dir.metrics(), &metrics)?;
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    Ok(StageOutcome::ok(calls, &refs))
}
