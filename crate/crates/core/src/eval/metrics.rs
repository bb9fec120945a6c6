use serde::{Deserialize, Serialize};

use crate::discrepancy::w1_1d;
use crate::error::{Error, Result};
use crate::simulators::Matrix;

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile of a weighted sample: the smallest value whose cumulative
/// normalized weight reaches `q`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i] / total;
        if acc >= q - 1e-12 {
            return values[i];
        }
    }
    values[idx[idx.len() - 1]]
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("empty sample".into()));
    }
    let (a, b) = (sorted(a), sorted(b));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// `(KS, W1)` between two scalar samples.
pub fn distribution_distances(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    Ok((ks_statistic(a, b)?, w1_1d(a, b)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordMetric {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_width: f64,
    pub covers: bool,
    pub ks: Option<f64>,
    pub w1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub coords: Vec<CoordMetric>,
    pub draws: usize,
    /// Mean squared score error against an oracle, when one exists.
    pub score_error: Option<f64>,
}

impl MetricReport {
    /// Adds per-coordinate KS and W1 distances to a reference sample.
    pub fn with_reference(mut self, samples: &Matrix, reference: &Matrix) -> Result<Self> {
        if reference.cols != samples.cols {
            return Err(Error::dim("reference columns", samples.cols, reference.cols));
        }
        for (j, c) in self.coords.iter_mut().enumerate() {
            let (ks, w1) = distribution_distances(&samples.column(j), &reference.column(j))?;
            c.ks = Some(ks);
            c.w1 = Some(w1);
        }
        Ok(self)
    }

    /// One row per coordinate: bias, CI95 width, coverage.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,truth,mean,bias,ci_low,ci_high,ci95_width,cover95,ks,w1\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for c in &self.coords {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                c.name,
                c.truth,
                c.mean,
                c.bias,
                c.ci_low,
                c.ci_high,
                c.ci_width,
                c.covers as u8,
                opt(c.ks),
                opt(c.w1)
            ));
        }
        out
    }
}

/// Bias, central credible interval and coverage per coordinate. `weights`
/// (importance weights, any positive scale) switch to weighted estimates.
pub fn posterior_metrics(
    samples: &Matrix,
    theta_star: &[f64],
    names: &[String],
    levels: (f64, f64),
    weights: Option<&[f64]>,
) -> Result<MetricReport> {
    if samples.rows == 0 {
        return Err(Error::Input("no posterior samples".into()));
    }
    if theta_star.len() != samples.cols {
        return Err(Error::dim("theta*", samples.cols, theta_star.len()));
    }
    if let Some(w) = weights {
        if w.len() != samples.rows || w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Input("weights must be finite, nonnegative and not all zero".into()));
        }
    }
    let coords = (0..samples.cols)
        .map(|j| {
            let col = samples.column(j);
            let (mean, lo, hi) = match weights {
                Some(w) => {
                    let tw: f64 = w.iter().sum();
                    let mean = col.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / tw;
                    (mean, weighted_quantile(&col, w, levels.0), weighted_quantile(&col, w, levels.1))
                }
                None => {
                    let s = sorted(&col);
                    let mean = col.iter().sum::<f64>() / col.len() as f64;
                    (mean, quantile_sorted(&s, levels.0), quantile_sorted(&s, levels.1))
                }
            };
            let truth = theta_star[j];
            CoordMetric {
                name: names.get(j).cloned().unwrap_or_else(|| format!("theta{}", j + 1)),
                truth,
                mean,
                bias: (mean - truth).abs(),
                ci_low: lo,
                ci_high: hi,
                ci_width: hi - lo,
                covers: lo <= truth && truth <= hi,
                ks: None,
                w1: None,
            }
        })
        .collect();
    Ok(MetricReport { coords, draws: samples.rows, score_error: None })
}
