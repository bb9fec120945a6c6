//! Reference tables of simulated `(theta, data)` pairs.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{Error, Result};
use crate::localization::Proposal;
use crate::rng::{derive_seed, row_rng, Rng};
use crate::simulators::{Matrix, Model, PriorSpec};

/// Where table parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaSource {
    Prior,
    Proposal(Proposal),
}

impl ThetaSource {
    fn draw(&self, prior: &PriorSpec, rng: &mut Rng) -> Vec<f64> {
        match self {
            ThetaSource::Prior => prior.sample(rng),
            ThetaSource::Proposal(q) => q.sample(rng),
        }
    }

    /// Gradient of the log sampling density (up to the support indicator).
    pub fn log_density_grad(&self, prior: &PriorSpec, theta: &[f64]) -> Result<Vec<f64>> {
        match self {
            ThetaSource::Prior => Ok(prior.log_density_grad(theta)?.1),
            ThetaSource::Proposal(q) => Ok(q.log_density_grad(theta)),
        }
    }
}

/// `G` groups, each one parameter with `group_size` observations.
///
/// The single-observation table has `group_size == 1`, the repeated-draw
/// table `group_size == m_R`, and the full-data table `group_size == n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    /// `G x d`.
    pub theta: Matrix,
    /// `(G * group_size) x p`, grouped contiguously.
    pub data: Matrix,
    pub group_size: usize,
    /// `G x d`: gradient of the log density theta was drawn from.
    pub log_grad: Matrix,
}

pub type ReferenceTableS = ReferenceTable;
pub type ReferenceTableR = ReferenceTable;
pub type ReferenceTableFull = ReferenceTable;

impl ReferenceTable {
    pub fn empty(d: usize, p: usize, group_size: usize) -> Self {
        Self {
            theta: Matrix::zeros(0, d),
            data: Matrix::zeros(0, p),
            group_size,
            log_grad: Matrix::zeros(0, d),
        }
    }

    pub fn groups(&self) -> usize {
        self.theta.rows
    }

    pub fn is_empty(&self) -> bool {
        self.theta.rows == 0
    }

    pub fn group_data(&self, g: usize) -> &[f64] {
        let stride = self.group_size * self.data.cols;
        &self.data.data[g * stride..(g + 1) * stride]
    }

    /// Observation `i` of group `g`.
    pub fn obs(&self, g: usize, i: usize) -> &[f64] {
        self.data.row(g * self.group_size + i)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Meta {
            groups: usize,
            group_size: usize,
            theta_dim: usize,
            data_dim: usize,
        }
        let meta = Meta {
            groups: self.groups(),
            group_size: self.group_size,
            theta_dim: self.theta.cols,
            data_dim: self.data.cols,
        };
        let mut values = self.theta.data.clone();
        values.extend_from_slice(&self.log_grad.data);
        values.extend_from_slice(&self.data.data);
        binfmt::save(path, &meta, &values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            groups: usize,
            group_size: usize,
            theta_dim: usize,
            data_dim: usize,
        }
        let (meta, values): (Meta, Vec<f64>) = binfmt::load(path)?;
        let (g, d) = (meta.groups, meta.theta_dim);
        let nt = g * d;
        let nd = g * meta.group_size * meta.data_dim;
        if values.len() != 2 * nt + nd {
            return Err(Error::dim("table payload", 2 * nt + nd, values.len()));
        }
        Ok(Self {
            theta: Matrix::from_vec(g, d, values[..nt].to_vec())?,
            log_grad: Matrix::from_vec(g, d, values[nt..2 * nt].to_vec())?,
            data: Matrix::from_vec(g * meta.group_size, meta.data_dim, values[2 * nt..].to_vec())?,
            group_size: meta.group_size,
        })
    }

    /// `row, theta..., data...` with one line per group.
    pub fn to_csv(&self, theta_names: &[String], data_names: &[String]) -> String {
        use std::fmt::Write as _;
        let mut s = String::from("row");
        for n in theta_names {
            s.push(',');
            s.push_str(n);
        }
        for i in 0..self.group_size {
            for n in data_names {
                if self.group_size == 1 {
                    write!(s, ",{n}").unwrap();
                } else {
                    write!(s, ",{n}_{}", i + 1).unwrap();
                }
            }
        }
        s.push('\n');
        for g in 0..self.groups() {
            write!(s, "{g}").unwrap();
            for v in self.theta.row(g).iter().chain(self.group_data(g)) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableSizes {
    /// `N` for the single-observation table.
    pub single: usize,
    /// `N_R` for the repeated-draw table.
    pub regression: usize,
    /// `m_R`.
    pub regression_draws: usize,
    /// `N` for the full-data table.
    pub full: usize,
    /// Observations per full-data group, the experiment's `n`.
    pub full_n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tables {
    pub single: ReferenceTableS,
    pub regression: ReferenceTableR,
    pub full: ReferenceTableFull,
    /// Simulated observations across all tables.
    pub simulator_calls: u64,
}

const MAX_REJECTION_RATE: f64 = 0.99;
const MAX_ATTEMPTS_PER_ROW: usize = 100_000;

/// Draw the three tables. Proposal draws are rejection-clipped to the prior
/// support; every group uses its own random stream.
pub fn build_reference_tables(
    model: &Model,
    prior: &PriorSpec,
    source: &ThetaSource,
    sizes: &TableSizes,
    seed: u64,
) -> Result<Tables> {
    model.validate()?;
    prior.validate()?;
    if prior.dim() != model.theta_dim() {
        return Err(Error::dim("prior dimension", model.theta_dim(), prior.dim()));
    }
    if let ThetaSource::Proposal(q) = source {
        if q.dim() != model.theta_dim() {
            return Err(Error::dim("proposal dimension", model.theta_dim(), q.dim()));
        }
    }
    if sizes.regression > 0 && sizes.regression_draws < 2 {
        return Err(Error::Config("the repeated-draw table needs m_R >= 2".into()));
    }
    if sizes.full > 0 && sizes.full_n == 0 {
        return Err(Error::Config("full-data table needs n >= 1".into()));
    }
    let single = build_one(model, prior, source, sizes.single, 1, derive_seed(seed, "single"))?;
    let regression = build_one(
        model,
        prior,
        source,
        sizes.regression,
        sizes.regression_draws.max(2),
        derive_seed(seed, "regression"),
    )?;
    let full = build_one(model, prior, source, sizes.full, sizes.full_n.max(1), derive_seed(seed, "full"))?;
    let simulator_calls = (single.data.rows + regression.data.rows + full.data.rows) as u64;
    Ok(Tables { single, regression, full, simulator_calls })
}

fn build_one(
    model: &Model,
    prior: &PriorSpec,
    source: &ThetaSource,
    groups: usize,
    group_size: usize,
    seed: u64,
) -> Result<ReferenceTable> {
    let (d, p, q) = (model.theta_dim(), model.data_dim(), model.latent_dim());
    let mut table = ReferenceTable::empty(d, p, group_size);
    if groups == 0 {
        return Ok(table);
    }
    table.theta = Matrix::zeros(groups, d);
    table.log_grad = Matrix::zeros(groups, d);
    table.data = Matrix::zeros(groups * group_size, p);
    let mut z = vec![0.0; q];
    let (mut attempts, mut accepted) = (0usize, 0usize);
    for g in 0..groups {
        let mut rng = row_rng(seed, g as u64);
        let mut tries = 0;
        let theta = loop {
            let t = source.draw(prior, &mut rng);
            attempts += 1;
            tries += 1;
            if prior.contains(&t) && model.check_theta(&t).is_ok() {
                break t;
            }
            if tries >= MAX_ATTEMPTS_PER_ROW {
                return Err(Error::Config(format!(
                    "no parameter draw inside the prior support after {tries} attempts"
                )));
            }
        };
        accepted += 1;
        table.log_grad.row_mut(g).copy_from_slice(&source.log_density_grad(prior, &theta)?);
        table.theta.row_mut(g).copy_from_slice(&theta);
        for i in 0..group_size {
            model.fill_latent_row(&mut rng, &mut z);
            model.simulate_row(&theta, &z, table.data.row_mut(g * group_size + i));
        }
    }
    let rate = 1.0 - accepted as f64 / attempts as f64;
    if rate > MAX_REJECTION_RATE {
        return Err(Error::Config(format!(
            "{:.2}% of proposal draws fell outside the prior support",
            100.0 * rate
        )));
    }
    Ok(table)
}

/// Replace every observation `x` by `x + eps`, `eps ~ N(0, sigma^2 I)`.
pub fn gaussian_smooth(table: &ReferenceTable, sigma: f64, seed: u64) -> Result<ReferenceTable> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("smoothing scale must be nonnegative, got {sigma}")));
    }
    let mut out = table.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    smooth_matrix(&mut out.data, sigma, seed);
    Ok(out)
}

/// Add independent `N(0, sigma^2)` noise to every entry, one stream per row.
pub fn smooth_matrix(m: &mut Matrix, sigma: f64, seed: u64) {
    for i in 0..m.rows {
        let mut rng = row_rng(seed, i as u64);
        for v in m.row_mut(i) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * e;
        }
    }
}
