use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ScoreSource};
use super::run::{sampler_support, RunDir};
use crate::error::{Error, Result};
use crate::eval::{credible_band, quantile_sorted};
use crate::langevin::{AnalyticScore, ScoreModel};
use crate::scorematch::TrainedScore;
use crate::simulators::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Density1d,
    CredibleBand,
    ScoreField,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "density_1d" => Ok(PlotKind::Density1d),
            "credible_band" => Ok(PlotKind::CredibleBand),
            "score_field" => Ok(PlotKind::ScoreField),
            _ => Err(Error::Input(format!("unknown plot kind `{s}`"))),
        }
    }
}

pub const DENSITY_GRID: usize = 512;
pub const FIELD_GRID: usize = 21;

/// Gaussian kernel density of `v` on an even grid reaching four bandwidths
/// past the extreme draws, with at least `min_points` points and spacing at
/// most half a bandwidth. Bandwidth by Silverman's rule.
pub fn kde_grid(v: &[f64], min_points: usize) -> Result<Vec<(f64, f64)>> {
    if v.len() < 2 || min_points < 2 {
        return Err(Error::Input("density needs two draws and two grid points".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let sd = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let mut h = 0.9 * spread * n.powf(-0.2);
    if !(h > 0.0) {
        h = 1e-3 * mean.abs().max(1.0);
    }
    let (lo, hi) = (s[0] - 4.0 * h, s[s.len() - 1] + 4.0 * h);
    let points = min_points.max(((hi - lo) / (0.5 * h)).ceil().min(1e6) as usize + 1);
    let step = (hi - lo) / (points - 1) as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok((0..points)
        .map(|i| {
            let x = lo + step * i as f64;
            // draws are sorted; only those within 8 bandwidths contribute
            let a = s.partition_point(|t| *t < x - 8.0 * h);
            let b = s.partition_point(|t| *t <= x + 8.0 * h);
            let dens = s[a..b].iter().map(|t| (-0.5 * ((x - t) / h).powi(2)).exp()).sum::<f64>() * norm;
            (x, dens)
        })
        .collect())
}

fn load_config(dir: &RunDir) -> Result<ExperimentConfig> {
    let p = dir.config();
    if !p.exists() {
        return Err(Error::MissingArtifact(p.display().to_string()));
    }
    ExperimentConfig::load(&p)
}

/// Writes CSV plot data for a finished run and returns the written paths.
pub fn emit_plot_data(run_dir: &Path, kind: PlotKind) -> Result<Vec<PathBuf>> {
    let dir = RunDir::new(run_dir);
    let cfg = load_config(&dir)?;
    let model = &cfg.model;
    let d = model.theta_dim();
    let names = model.theta_columns();
    let (samples, _) = dir.load_samples(d)?;
    if samples.rows < 2 {
        return Err(Error::Input("plot data needs at least two posterior draws".into()));
    }
    let mut written = Vec::new();
    match kind {
        PlotKind::Density1d => {
            let mut csv = String::from("parameter,x,density\n");
            for (j, name) in names.iter().enumerate() {
                for (x, f) in kde_grid(&samples.column(j), DENSITY_GRID)? {
                    csv.push_str(&format!("{name},{x},{f}\n"));
                }
            }
            let p = dir.path("density_1d.csv");
            std::fs::write(&p, csv)?;
            written.push(p);
        }
        PlotKind::CredibleBand => {
            let Model::BernsteinMonotone { order, .. } = *model else {
                return Err(Error::Input("credible bands need the bernstein_monotone model".into()));
            };
            let band = credible_band(&samples, order)?;
            let header = ["x", "q025", "q50", "q975"].map(String::from);
            let p = dir.path("credible_band.csv");
            std::fs::write(&p, band.to_csv(&header)?)?;
            written.push(p);
        }
        PlotKind::ScoreField => {
            let x = dir.load_observed()?;
            let support = sampler_support(&cfg, &x)?;
            let trained = match cfg.score {
                ScoreSource::Trained => Some(TrainedScore::load(&dir.score())?),
                ScoreSource::Analytic => None,
            };
            let mut estimated = trained.as_ref().map(TrainedScore::evaluator).transpose()?;
            let mut analytic = AnalyticScore(model);
            let has_truth = model.analytic_score(&vec![0.5; d], &vec![0.5; model.data_dim()]).is_some();
            let means = samples.column_means();
            let sds = samples.column_sds();
            let axes: Vec<usize> = (0..d.min(2)).collect();
            let grid_axis = |j: usize| -> Vec<f64> {
                let (lo, hi) = support.bounds[j];
                let span = 3.0 * sds[j].max(1e-6);
                let (a, b) = ((means[j] - span).max(lo), (means[j] + span).min(hi));
                // keep grid points strictly inside the support
                let (a, b) = (a + 1e-9 * (b - a), b - 1e-9 * (b - a));
                (0..FIELD_GRID).map(|i| a + (b - a) * i as f64 / (FIELD_GRID - 1) as f64).collect()
            };
            let grids: Vec<Vec<f64>> = axes.iter().map(|&j| grid_axis(j)).collect();
            let mut header: Vec<String> = names.clone();
            header.extend(names.iter().map(|n| format!("est_{n}")));
            if has_truth {
                header.extend(names.iter().map(|n| format!("true_{n}")));
            }
            let mut csv = header.join(",") + "\n";
            let points: Vec<Vec<f64>> = if d == 1 {
                grids[0].iter().map(|&a| vec![a]).collect()
            } else {
                grids[0]
                    .iter()
                    .flat_map(|&a| {
                        let means = &means;
                        grids[1].iter().map(move |&b| {
                            let mut t = means.clone();
                            t[0] = a;
                            t[1] = b;
                            t
                        })
                    })
                    .collect()
            };
            for t in points {
                let est = match &mut estimated {
                    Some(e) => e.full_score(&t, &x)?,
                    None => analytic.full_score(&t, &x)?,
                };
                let mut row: Vec<String> = t.iter().chain(&est).map(|v| format!("{v}")).collect();
                if has_truth {
                    row.extend(analytic.full_score(&t, &x)?.iter().map(|v| format!("{v}")));
                }
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            let p = dir.path("score_field.csv");
            std::fs::write(&p, csv)?;
            written.push(p);
        }
    }
    Ok(written)
}
