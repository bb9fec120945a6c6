//! Two-phase training with a validation split, lambda selection and the
//! mean-matching debias step.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::boundary::{interior_groups, WeightFn};
use super::losses::{LossKind, MeanRegressionObjective, RegularizedSingleObjective, ScoreObjective};
use super::tables::ReferenceTable;
use crate::diffnet::{load_weights, save_weights, Activation, AdamState, Evaluator, LrSchedule, NetSpec, NetworkWeights, Scaling, SummedForward};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::simulators::{Matrix, PriorSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputScale {
    Fixed { value: f64 },
    PerCoordinate { values: Vec<f64> },
    /// `1 / (sd_j * sqrt(n))` from the proposal, resolved by the pipeline.
    FromProposal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_scale: OutputScale,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden: vec![32, 32], activation: Activation::Elu, output_scale: OutputScale::Fixed { value: 1.0 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub batch_size: usize,
    /// Phase one, unpenalized.
    pub epochs: usize,
    /// Phase two, per penalty candidate.
    pub penalty_epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_stages: usize,
    pub lambda_grid: Vec<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 20,
            penalty_epochs: 10,
            lr_start: 1e-3,
            lr_end: 1e-5,
            lr_stages: 10,
            lambda_grid: vec![0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebiasConfig {
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    /// A fitted mean network replaces `h = 0` only when its paired validation
    /// improvement exceeds this many standard errors.
    pub min_z: f64,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            optim: OptimConfig { batch_size: 64, epochs: 200, penalty_epochs: 50, ..OptimConfig::default() },
            min_z: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    /// Repeated-draw groups per step for the curvature penalty; `None`
    /// spreads the training half evenly over one epoch.
    pub regression_groups_per_batch: Option<usize>,
    /// Single-observation rows closer than this to a uniform-prior face are
    /// left out of training.
    pub boundary_margin: Option<f64>,
    pub debias: Option<DebiasConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            optim: OptimConfig::default(),
            regression_groups_per_batch: None,
            boundary_margin: Some(1e-9),
            debias: Some(DebiasConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub lambda: f64,
    /// Unpenalized validation loss; `None` when the candidate was discarded.
    pub validation: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub loss: Option<LossKind>,
    pub lambda: f64,
    pub candidates: Vec<CandidateReport>,
    pub phase1_train_loss: Vec<f64>,
    pub excluded_boundary_rows: usize,
    pub lambda2: Option<f64>,
    pub debias_candidates: Vec<CandidateReport>,
    pub debias_zero_validation: Option<f64>,
    pub debias_note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanNetwork {
    pub spec: NetSpec,
    pub weights: NetworkWeights,
}

/// A trained score network, optionally debiased by a mean network.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedScore {
    pub spec: NetSpec,
    pub weights: NetworkWeights,
    pub mean: Option<MeanNetwork>,
    pub meta: TrainingMeta,
}

impl TrainedScore {
    pub fn debiased(&self) -> bool {
        self.mean.is_some()
    }

    pub fn evaluator(&self) -> Result<ScoreEvaluator<'_>> {
        Ok(ScoreEvaluator {
            score: Evaluator::new(&self.spec, self.weights.as_slice())?,
            mean: match &self.mean {
                Some(m) => Some(Evaluator::new(&m.spec, m.weights.as_slice())?),
                None => None,
            },
            buf: vec![0.0; self.spec.theta_dim],
            owner: self,
            summed: None,
        })
    }

    /// The same network without its mean correction.
    pub fn without_debias(&self) -> TrainedScore {
        TrainedScore { mean: None, ..self.clone() }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_weights(&dir.join("score.weights"), &self.spec, &self.weights)?;
        if let Some(m) = &self.mean {
            save_weights(&dir.join("mean.weights"), &m.spec, &m.weights)?;
        }
        let meta = serde_json::json!({ "debiased": self.debiased(), "training": self.meta });
        std::fs::write(dir.join("training.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let score_path = dir.join("score.weights");
        if !score_path.exists() {
            return Err(Error::MissingArtifact(score_path.display().to_string()));
        }
        let (spec, weights) = load_weights(&score_path)?;
        let mean_path = dir.join("mean.weights");
        let mean = if mean_path.exists() {
            let (spec, weights) = load_weights(&mean_path)?;
            Some(MeanNetwork { spec, weights })
        } else {
            None
        };
        let meta_text = std::fs::read_to_string(dir.join("training.json"))?;
        let v: serde_json::Value = serde_json::from_str(&meta_text)?;
        let meta = serde_json::from_value(v["training"].clone())?;
        Ok(Self { spec, weights, mean, meta })
    }
}

/// Evaluation buffers for a [`TrainedScore`].
pub struct ScoreEvaluator<'a> {
    score: Evaluator<'a>,
    mean: Option<Evaluator<'a>>,
    buf: Vec<f64>,
    owner: &'a TrainedScore,
    /// Batched pass over the last dataset seen by `full`.
    summed: Option<SummedForward<'a>>,
}

impl<'a> ScoreEvaluator<'a> {
    /// Effective single-observation score `s(theta, x) - h(theta)`.
    pub fn single(&mut self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut s = self.score.forward(theta, x)?.to_vec();
        if let Some(h) = &mut self.mean {
            let hv = h.forward(theta, &[])?;
            s.iter_mut().zip(hv).for_each(|(a, b)| *a -= b);
        }
        Ok(s)
    }

    /// Effective score with its theta-Jacobian.
    pub fn single_with_jacobian(&mut self, theta: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (s, j) = self.score.eval(theta, x)?;
        let (mut s, mut j) = (s.to_vec(), j.to_vec());
        if let Some(h) = &mut self.mean {
            let (hv, hj) = h.eval(theta, &[])?;
            s.iter_mut().zip(hv).for_each(|(a, b)| *a -= b);
            j.iter_mut().zip(hj).for_each(|(a, b)| *a -= b);
        }
        Ok((s, j))
    }

    /// Additive full-data score `sum_i s(theta, x_i) - n h(theta)`.
    pub fn full(&mut self, theta: &[f64], data: &Matrix) -> Result<Vec<f64>> {
        let d = theta.len();
        if data.cols != self.owner.spec.data_dim {
            return Err(Error::dim("data columns", self.owner.spec.data_dim, data.cols));
        }
        if data.rows == 0 {
            self.buf.iter_mut().for_each(|v| *v = 0.0);
        } else {
            if !self.summed.as_ref().is_some_and(|f| f.matches(&data.data)) {
                let owner = self.owner;
                self.summed = Some(SummedForward::new(&owner.spec, owner.weights.as_slice(), &data.data)?);
            }
            let s = self.summed.as_mut().expect("built above").sum(theta)?;
            self.buf.copy_from_slice(s);
        }
        if let Some(h) = &mut self.mean {
            let hv = h.forward(theta, &[])?;
            let n = data.rows as f64;
            for j in 0..d {
                self.buf[j] -= n * hv[j];
            }
        }
        Ok(self.buf.clone())
    }
}

fn column_scaling(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let shift = m.column_means();
    let scale = m.column_sds().into_iter().map(|s| if s > 1e-12 && s.is_finite() { s } else { 1.0 }).collect();
    (shift, scale)
}

fn resolve_output_scale(cfg: &OutputScale, d: usize) -> Result<Vec<f64>> {
    let v = match cfg {
        OutputScale::Fixed { value } => vec![*value; d],
        OutputScale::PerCoordinate { values } => values.clone(),
        OutputScale::FromProposal => {
            return Err(Error::Config("output scale `from_proposal` must be resolved before training".into()))
        }
    };
    if v.len() != d || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::Config(format!("invalid output scale {v:?}")));
    }
    Ok(v)
}

/// Network spec with inputs standardized from the table.
pub fn score_spec(net: &NetworkConfig, table: &ReferenceTable) -> Result<NetSpec> {
    let (d, p) = (table.theta.cols, table.data.cols);
    let (ts, tc) = column_scaling(&table.theta);
    let (ds, dc) = column_scaling(&table.data);
    let spec = NetSpec::new(d, p, net.hidden.clone(), net.activation).with_scaling(Scaling {
        theta_shift: ts,
        theta_scale: tc,
        data_shift: ds,
        data_scale: dc,
        output_scale: resolve_output_scale(&net.output_scale, d)?,
    });
    spec.validate()?;
    Ok(spec)
}


type BatchLoss<'a> = dyn FnMut(f64, &[usize], &[f64], &mut [f64]) -> Result<f64> + 'a;

/// One optimization phase over shuffled mini-batches of `items`.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    w: &mut [f64],
    items: &[usize],
    opt: &OptimConfig,
    epochs: usize,
    seed: u64,
    lambda: f64,
    batch_loss: &mut BatchLoss,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Training("no training rows".into()));
    }
    let bs = opt.batch_size.max(1);
    let per_epoch = items.len().div_ceil(bs);
    let mut adam = AdamState::new(
        w.len(),
        LrSchedule::StepDecay {
            start: opt.lr_start,
            end: opt.lr_end,
            stages: opt.lr_stages.max(1),
            total_steps: (epochs * per_epoch).max(1),
        },
    );
    let mut rng = rng_from_seed(seed);
    let mut order = items.to_vec();
    let mut grad = vec![0.0; w.len()];
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(bs) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = batch_loss(lambda, batch, w, &mut grad)?;
            if !loss.is_finite() {
                return Err(Error::non_finite("training loss"));
            }
            adam.step(w, &grad)?;
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite("network weights"));
            }
            total += loss * batch.len() as f64;
        }
        curve.push(total / items.len() as f64);
    }
    Ok(curve)
}

/// Phase one without penalty, then phase two from the phase-one weights for
/// every grid value; the candidate with the smallest finite validation loss
/// wins. Diverging candidates are recorded and skipped.
fn two_phase(
    spec: &NetSpec,
    opt: &OptimConfig,
    items: &[usize],
    seed: u64,
    meta: &mut TrainingMeta,
    batch_loss: &mut BatchLoss,
    valid: &dyn Fn(&[f64]) -> Result<f64>,
) -> Result<(Vec<f64>, f64)> {
    let mut base = NetworkWeights::init(spec, derive_seed(seed, "init")).0;
    meta.phase1_train_loss = run_phase(&mut base, items, opt, opt.epochs, derive_seed(seed, "phase1"), 0.0, batch_loss)
        .map_err(|e| Error::Training(format!("phase one: {e}")))?;
    let grid = if opt.lambda_grid.is_empty() { vec![0.0] } else { opt.lambda_grid.clone() };
    meta.candidates.clear();
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for (k, &lambda) in grid.iter().enumerate() {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("penalty weight {lambda} must be finite and nonnegative")));
        }
        let mut w = base.clone();
        let seed_k = derive_seed(seed, &format!("phase2-{k}"));
        let outcome = run_phase(&mut w, items, opt, opt.penalty_epochs, seed_k, lambda, batch_loss)
            .or_else(|e| if opt.penalty_epochs == 0 { Ok(Vec::new()) } else { Err(e) })
            .and_then(|_| valid(&w));
        let report = match outcome {
            Ok(v) if v.is_finite() => {
                if best.as_ref().is_none_or(|b| v < b.0) {
                    best = Some((v, w, lambda));
                }
                CandidateReport { lambda, validation: Some(v), note: None }
            }
            Ok(v) => CandidateReport { lambda, validation: None, note: Some(format!("validation loss {v}")) },
            Err(e) => CandidateReport { lambda, validation: None, note: Some(e.to_string()) },
        };
        meta.candidates.push(report);
    }
    let (_, w, lambda) = best.ok_or_else(|| Error::Training("every penalty candidate failed".into()))?;
    meta.lambda = lambda;
    Ok((w, lambda))
}

fn split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let half = n / 2;
    ((0..half).collect(), (half..n).collect())
}

/// Cycles through a shuffled list of repeated-draw groups.
struct GroupCycler {
    order: Vec<usize>,
    cursor: usize,
    per_step: usize,
}

impl GroupCycler {
    fn new(mut order: Vec<usize>, per_step: usize, seed: u64) -> Self {
        order.shuffle(&mut rng_from_seed(seed));
        Self { order, cursor: 0, per_step: per_step.max(1) }
    }

    fn next(&mut self) -> Vec<usize> {
        let n = self.order.len();
        (0..self.per_step.min(n))
            .map(|_| {
                let g = self.order[self.cursor];
                self.cursor = (self.cursor + 1) % n;
                g
            })
            .collect()
    }
}

/// Trains on single-observation groups with the curvature penalty computed
/// from repeated-draw groups, then optionally fits the mean correction.
///
/// The first half of each table trains and the second half validates. A
/// weight function applies to the score term of both.
pub fn train_single(
    single: &ReferenceTable,
    regression: Option<&ReferenceTable>,
    prior: Option<&PriorSpec>,
    weight: Option<&dyn WeightFn>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedScore> {
    if single.group_size != 1 {
        return Err(Error::Input(format!("expected single-observation groups, got size {}", single.group_size)));
    }
    let penalized = cfg.optim.lambda_grid.iter().any(|l| *l != 0.0);
    if let Some(r) = regression {
        if r.theta.cols != single.theta.cols || r.data.cols != single.data.cols {
            return Err(Error::Input("regression table shape does not match the single table".into()));
        }
    }
    let reg = match regression {
        Some(r) if r.groups() >= 2 => Some(r),
        _ if penalized => return Err(Error::Config("a nonzero penalty needs at least two repeated-draw groups".into())),
        _ => None,
    };
    let spec = score_spec(&cfg.network, single)?;
    let mut meta = TrainingMeta::default();
    let (mut train, mut val) = split(single.groups());
    if let (Some(margin), Some(prior)) = (cfg.boundary_margin, prior) {
        let (t, dt) = interior_groups(single, prior, &train, margin);
        let (v, dv) = interior_groups(single, prior, &val, margin);
        train = t;
        val = v;
        meta.excluded_boundary_rows = dt + dv;
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training("too few rows for a train/validation split".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.optim.batch_size.max(1));
    let mut cycler = reg.map(|r| {
        let (rt, _) = split(r.groups());
        let per = cfg.regression_groups_per_batch.unwrap_or_else(|| rt.len().div_ceil(steps_per_epoch));
        GroupCycler::new(rt, per, derive_seed(seed, "regression-order"))
    });
    let empty = ReferenceTable::empty(single.theta.cols, single.data.cols, 1);
    let r_table = reg.unwrap_or(&empty);
    let spec_ref = &spec;
    let mut batch_loss = |lambda: f64, batch: &[usize], w: &[f64], grad: &mut [f64]| -> Result<f64> {
        let r_groups = match (&mut cycler, lambda != 0.0) {
            (Some(c), true) => c.next(),
            _ => Vec::new(),
        };
        RegularizedSingleObjective {
            single,
            single_groups: batch,
            weight,
            regression: r_table,
            regression_groups: &r_groups,
            lambda1: lambda,
        }
        .parts(spec_ref, w, Some(grad))
        .map(|p| p.total())
    };
    let valid = |w: &[f64]| -> Result<f64> {
        let obj = ScoreObjective { weight, ..ScoreObjective::new(single, &val) };
        Ok(obj.parts(spec_ref, w, None)?.score)
    };
    let (w, lambda) = two_phase(&spec, &cfg.optim, &train, seed, &mut meta, &mut batch_loss, &valid)?;
    meta.loss = Some(if reg.is_none() && lambda == 0.0 { LossKind::Naive } else { LossKind::RegularizedSingle { lambda1: lambda } });
    let trained = TrainedScore { spec, weights: NetworkWeights(w), mean: None, meta };
    match (&cfg.debias, reg) {
        (Some(dcfg), Some(r)) => train_debias(&trained, r, dcfg, derive_seed(seed, "debias")),
        _ => Ok(trained),
    }
}

/// Trains on full-data groups, with optional boundary weights. The curvature
/// penalty uses the group's own observations.
pub fn train_full(full: &ReferenceTable, weight: Option<&dyn WeightFn>, cfg: &TrainConfig, seed: u64) -> Result<TrainedScore> {
    let spec = score_spec(&cfg.network, full)?;
    let mut meta = TrainingMeta::default();
    let (train, val) = split(full.groups());
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training("too few groups for a train/validation split".into()));
    }
    let spec_ref = &spec;
    let mut batch_loss =
        |lambda: f64, batch: &[usize], w: &[f64], grad: &mut [f64]| -> Result<f64> { Ok(full_objective(full, batch, weight, lambda).parts(spec_ref, w, Some(grad))?.total()) };
    let valid = |w: &[f64]| -> Result<f64> { Ok(full_objective(full, &val, weight, 0.0).parts(spec_ref, w, None)?.score) };
    let (w, lambda) = two_phase(&spec, &cfg.optim, &train, seed, &mut meta, &mut batch_loss, &valid)?;
    meta.loss = Some(if weight.is_some() { LossKind::Weighted } else { LossKind::FullData { lambda } });
    Ok(TrainedScore { spec, weights: NetworkWeights(w), mean: None, meta })
}

fn full_objective<'a>(table: &'a ReferenceTable, groups: &'a [usize], weight: Option<&'a dyn WeightFn>, lambda: f64) -> ScoreObjective<'a> {
    ScoreObjective { table, groups, weight, lambda }
}

/// Per-group mean of the raw score network over each group's observations.
pub fn group_mean_scores(score: &TrainedScore, table: &ReferenceTable) -> Result<Matrix> {
    let d = score.spec.theta_dim;
    let mut ev = Evaluator::new(&score.spec, score.weights.as_slice())?;
    let mut out = Matrix::zeros(table.groups(), d);
    let inv = 1.0 / table.group_size as f64;
    for g in 0..table.groups() {
        let theta = table.theta.row(g).to_vec();
        for i in 0..table.group_size {
            let s = ev.forward(&theta, table.obs(g, i))?;
            let row = out.row_mut(g);
            for j in 0..d {
                row[j] += inv * s[j];
            }
        }
    }
    Ok(out)
}

/// Fits `h(theta)` to the group-mean scores and keeps it only when it beats
/// `h = 0` on held-out groups.
///
/// Repeated-draw groups are split into halves for fitting, a quarter for
/// choosing `lambda2` and a quarter for the acceptance test, which compares
/// `||h - sbar||^2` against `||sbar||^2` group by group.
pub fn train_debias(score: &TrainedScore, regression: &ReferenceTable, cfg: &DebiasConfig, seed: u64) -> Result<TrainedScore> {
    let d = score.spec.theta_dim;
    let targets = group_mean_scores(score, regression)?;
    let g = regression.groups();
    let (fit_end, sel_end) = (g / 2, g / 2 + g / 4);
    let fit: Vec<usize> = (0..fit_end).collect();
    let select: Vec<usize> = (fit_end..sel_end).collect();
    let test: Vec<usize> = (sel_end..g).collect();
    let mut out = score.without_debias();
    if fit.is_empty() || select.is_empty() || test.len() < 2 {
        out.meta.debias_note = Some(format!("skipped: {g} repeated-draw groups are too few"));
        return Ok(out);
    }
    let (ts, tc) = column_scaling(&regression.theta);
    let target_sd: Vec<f64> = targets.column_sds().into_iter().map(|s| if s > 1e-12 && s.is_finite() { s } else { 1.0 }).collect();
    let base = resolve_output_scale(&cfg.network.output_scale, d)?;
    let spec = NetSpec::new(d, 0, cfg.network.hidden.clone(), cfg.network.activation).with_scaling(Scaling {
        theta_shift: ts,
        theta_scale: tc,
        data_shift: Vec::new(),
        data_scale: Vec::new(),
        output_scale: base.iter().zip(&target_sd).map(|(a, b)| a * b).collect(),
    });
    spec.validate()?;
    let theta = &regression.theta;
    let targets_ref = &targets;
    let spec_ref = &spec;
    let mut batch_loss = |lambda2: f64, batch: &[usize], w: &[f64], grad: &mut [f64]| -> Result<f64> {
        Ok(MeanRegressionObjective { theta, targets: targets_ref, groups: batch, lambda2 }.parts(spec_ref, w, Some(grad))?.total())
    };
    let valid = |w: &[f64]| -> Result<f64> {
        Ok(MeanRegressionObjective { theta, targets: targets_ref, groups: &select, lambda2: 0.0 }.parts(spec_ref, w, None)?.score)
    };
    let mut dmeta = TrainingMeta::default();
    let fitted = two_phase(&spec, &cfg.optim, &fit, seed, &mut dmeta, &mut batch_loss, &valid);
    out.meta.debias_candidates = dmeta.candidates;
    let (w, lambda2) = match fitted {
        Ok(v) => v,
        Err(e) => {
            out.meta.debias_note = Some(format!("kept h = 0: {e}"));
            return Ok(out);
        }
    };
    let mut ev = Evaluator::new(&spec, &w)?;
    let mut diffs = Vec::with_capacity(test.len());
    let mut zero = 0.0;
    for &l in &test {
        let sbar = targets.row(l);
        let h = ev.forward(theta.row(l), &[])?;
        let base_err: f64 = sbar.iter().map(|v| v * v).sum();
        let fit_err: f64 = h.iter().zip(sbar).map(|(a, b)| (a - b) * (a - b)).sum();
        zero += base_err;
        diffs.push(base_err - fit_err);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    out.meta.debias_zero_validation = Some(zero / n);
    if mean > 0.0 && mean > cfg.min_z * se {
        out.meta.lambda2 = Some(lambda2);
        out.meta.debias_note = Some(format!("accepted: improvement {mean:.3e} with standard error {se:.3e}"));
        out.mean = Some(MeanNetwork { spec, weights: NetworkWeights(w) });
    } else {
        out.meta.debias_note = Some(format!("kept h = 0: improvement {mean:.3e} with standard error {se:.3e}"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    // theta ~ N(0, 1), x | theta ~ N(theta, 1); true score x - theta.
    fn pairs(n: usize, seed: u64) -> ReferenceTable {
        let mut rng = rng_from_seed(seed);
        let mut t = ReferenceTable::empty(1, 1, 1);
        for _ in 0..n {
            let th: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            t.theta.push_row(&[th]).unwrap();
            t.log_grad.push_row(&[-th]).unwrap();
            t.data.push_row(&[th + e]).unwrap();
        }
        t
    }

    fn groups(g: usize, m: usize, seed: u64) -> ReferenceTable {
        let mut rng = rng_from_seed(seed);
        let mut t = ReferenceTable::empty(1, 1, m);
        for _ in 0..g {
            let th: f64 = rng.sample(StandardNormal);
            t.theta.push_row(&[th]).unwrap();
            t.log_grad.push_row(&[-th]).unwrap();
            for _ in 0..m {
                let e: f64 = rng.sample(StandardNormal);
                t.data.push_row(&[th + e]).unwrap();
            }
        }
        t
    }

    fn fisher(score: &TrainedScore, t: &ReferenceTable) -> f64 {
        let mut ev = score.evaluator().unwrap();
        let mut total = 0.0;
        for g in 0..t.groups() {
            let (th, x) = (t.theta.row(g), t.data.row(g));
            let s = ev.single(th, x).unwrap()[0];
            total += (s - (x[0] - th[0])).powi(2);
        }
        total / t.groups() as f64
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            network: NetworkConfig { hidden: vec![16], activation: Activation::Elu, ..NetworkConfig::default() },
            optim: OptimConfig {
                batch_size: 64,
                epochs: 40,
                penalty_epochs: 5,
                lr_start: 1e-2,
                lr_end: 1e-4,
                lr_stages: 4,
                lambda_grid: vec![0.0, 1e-3],
            },
            regression_groups_per_batch: Some(2),
            boundary_margin: None,
            debias: None,
        }
    }

    #[test]
    fn training_reduces_fisher_divergence() {
        let single = pairs(2000, 1);
        let reg = groups(40, 20, 2);
        let held_out = pairs(2000, 3);
        let cfg = quick_config();
        let spec = score_spec(&cfg.network, &single).unwrap();
        let init = TrainedScore {
            weights: NetworkWeights::init(&spec, derive_seed(7, "init")),
            spec,
            mean: None,
            meta: TrainingMeta::default(),
        };
        let trained = train_single(&single, Some(&reg), None, None, &cfg, 7).unwrap();
        let (before, after) = (fisher(&init, &held_out), fisher(&trained, &held_out));
        assert!(after <= 0.1 * before, "fisher {before} -> {after}");
        assert_eq!(trained.meta.candidates.len(), 2);
        assert!(matches!(trained.meta.loss, Some(LossKind::RegularizedSingle { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let single = pairs(300, 4);
        let mut cfg = quick_config();
        cfg.optim.epochs = 3;
        cfg.optim.lambda_grid = vec![0.0];
        let a = train_single(&single, None, None, None, &cfg, 5).unwrap();
        let b = train_single(&single, None, None, None, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = train_single(&single, None, None, None, &cfg, 6).unwrap();
        assert_ne!(a.weights, c.weights);
        assert_eq!(a.meta.loss, Some(LossKind::Naive));
    }

    #[test]
    fn penalty_without_repeated_draws_is_rejected() {
        let single = pairs(50, 4);
        assert!(matches!(train_single(&single, None, None, None, &quick_config(), 1), Err(Error::Config(_))));
    }

    #[test]
    fn boundary_rows_are_excluded() {
        let mut single = pairs(200, 8);
        for g in [0, 150] {
            single.theta.row_mut(g)[0] = 5.0;
        }
        let prior = PriorSpec::uniform(&[(-10.0, 5.0)]);
        let mut cfg = quick_config();
        cfg.optim.epochs = 1;
        cfg.optim.lambda_grid = vec![0.0];
        cfg.boundary_margin = Some(1e-9);
        let t = train_single(&single, None, Some(&prior), None, &cfg, 1).unwrap();
        assert_eq!(t.meta.excluded_boundary_rows, 2);
    }

    fn affine_score(bias: f64, table: &ReferenceTable) -> TrainedScore {
        // s = x - theta + bias with identity scaling
        let spec = NetSpec::new(1, 1, vec![], Activation::Elu).with_scaling(Scaling::identity(1, 1, 1));
        let _ = table;
        TrainedScore { spec, weights: NetworkWeights(vec![-1.0, 1.0, bias]), mean: None, meta: TrainingMeta::default() }
    }

    fn debias_config() -> DebiasConfig {
        DebiasConfig {
            network: NetworkConfig { hidden: vec![8], ..NetworkConfig::default() },
            optim: OptimConfig {
                batch_size: 16,
                epochs: 60,
                penalty_epochs: 10,
                lr_start: 1e-2,
                lr_end: 1e-4,
                lr_stages: 3,
                lambda_grid: vec![0.0, 1e-2],
            },
            min_z: 2.0,
        }
    }

    #[test]
    fn debias_removes_a_constant_offset() {
        let reg = groups(200, 50, 9);
        let biased = affine_score(0.5, &reg);
        let out = train_debias(&biased, &reg, &debias_config(), 3).unwrap();
        assert!(out.debiased(), "{:?}", out.meta.debias_note);
        let mut ev = out.evaluator().unwrap();
        for th in [-1.0, 0.0, 1.0] {
            let s = ev.single(&[th], &[th]).unwrap()[0];
            assert!(s.abs() < 0.1, "residual offset {s} at {th}");
        }
        let mut ev0 = biased.evaluator().unwrap();
        assert_eq!(ev0.single(&[0.0], &[0.0]).unwrap()[0], 0.5);
    }

    #[test]
    fn debias_keeps_zero_for_an_unbiased_score() {
        let reg = groups(200, 50, 10);
        let exact = affine_score(0.0, &reg);
        let out = train_debias(&exact, &reg, &debias_config(), 4).unwrap();
        assert!(!out.debiased(), "{:?}", out.meta.debias_note);
        assert!(out.meta.debias_zero_validation.is_some());
    }

    #[test]
    fn debias_with_too_few_groups_is_skipped() {
        let reg = groups(3, 3, 11);
        let out = train_debias(&affine_score(1.0, &reg), &reg, &debias_config(), 1).unwrap();
        assert!(!out.debiased());
        assert!(out.meta.debias_note.unwrap().starts_with("skipped"));
    }

    #[test]
    fn trained_score_round_trips_through_files() {
        let reg = groups(200, 50, 9);
        let out = train_debias(&affine_score(0.5, &reg), &reg, &debias_config(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.save(dir.path()).unwrap();
        assert_eq!(TrainedScore::load(dir.path()).unwrap(), out);
        let missing = tempfile::tempdir().unwrap();
        assert!(matches!(TrainedScore::load(missing.path()), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn full_score_sums_observations_minus_n_h() {
        let reg = groups(200, 50, 9);
        let out = train_debias(&affine_score(0.5, &reg), &reg, &debias_config(), 3).unwrap();
        let data = Matrix::from_rows(&[vec![0.3], vec![1.1], vec![-0.4]]).unwrap();
        let mut ev = out.evaluator().unwrap();
        let full = ev.full(&[0.2], &data).unwrap()[0];
        let sum: f64 = data.iter_rows().map(|r| ev.single(&[0.2], r).unwrap()[0]).sum();
        assert!((full - sum).abs() < 1e-12);
    }
}
