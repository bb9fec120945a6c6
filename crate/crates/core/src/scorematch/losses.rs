//! Score-matching objectives over reference tables.
//!
//! Every objective is a mean over table groups. For a group with parameter
//! `theta`, observations `x_1..x_n`, summed score `S = sum_i s(theta, x_i)`
//! and summed divergence terms `T_j = sum_i ds_j/dtheta_j`, the score term is
//!
//! ```text
//! (1/n) [ 1/2 sum_j g_j S_j^2 + sum_j g_j S_j l_j + sum_j (g_j T_j + S_j dg_j) ]
//! ```
//!
//! with `l = grad log` of the sampling density and weights `g` (all ones when
//! unweighted). The curvature penalty of a group is
//! `lambda || (1/n) sum_i (s_i s_i^T + grad s_i) ||_F^2`.

use serde::{Deserialize, Serialize};

use super::boundary::WeightFn;
use super::tables::ReferenceTable;
use crate::diffnet::{Evaluator, NetSpec, Objective};
use crate::error::{Error, Result};
use crate::simulators::Matrix;

/// The registered loss forms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Naive,
    RegularizedSingle { lambda1: f64 },
    MeanRegression { lambda2: f64 },
    FullData { lambda: f64 },
    Weighted,
}

/// Per-group breakdown of an objective value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub score: f64,
    pub penalty: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.score + self.penalty
    }
}

struct Scratch {
    s: Vec<f64>,
    jac: Vec<f64>,
    adj_s: Vec<f64>,
    adj_j: Vec<f64>,
    g: Vec<f64>,
    dg: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, n: usize) -> Self {
        Self {
            s: vec![0.0; n * d],
            jac: vec![0.0; n * d * d],
            adj_s: vec![0.0; d],
            adj_j: vec![0.0; d * d],
            g: vec![1.0; d],
            dg: vec![0.0; d],
        }
    }
}

/// Score term plus optional curvature penalty on one group; adds
/// `scale * d(loss)/dw` into `grad`.
#[allow(clippy::too_many_arguments)]
fn group_loss(
    ev: &mut Evaluator,
    table: &ReferenceTable,
    group: usize,
    weight: Option<&dyn WeightFn>,
    score_on: bool,
    lambda: f64,
    scale: f64,
    sc: &mut Scratch,
    grad: Option<&mut [f64]>,
) -> Result<LossParts> {
    let d = table.theta.cols;
    let n = table.group_size;
    let theta = table.theta.row(group);
    let lg = table.log_grad.row(group);
    let single_pass = n == 1 && lambda == 0.0;

    // forward with tangents for every observation
    for i in 0..n {
        let (s, j) = ev.eval(theta, table.obs(group, i))?;
        sc.s[i * d..(i + 1) * d].copy_from_slice(s);
        sc.jac[i * d * d..(i + 1) * d * d].copy_from_slice(j);
    }

    let mut parts = LossParts::default();
    let inv_n = 1.0 / n as f64;
    let mut big_s = vec![0.0; d];
    if score_on {
        match weight {
            Some(w) => w.eval(theta, table.group_data(group), &mut sc.g, &mut sc.dg)?,
            None => {
                sc.g.iter_mut().for_each(|v| *v = 1.0);
                sc.dg.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut trace = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                big_s[j] += sc.s[i * d + j];
                trace[j] += sc.jac[i * d * d + j * d + j];
            }
        }
        let mut quad = 0.0;
        let mut cross = 0.0;
        let mut div = 0.0;
        for j in 0..d {
            quad += sc.g[j] * big_s[j] * big_s[j];
            cross += sc.g[j] * big_s[j] * lg[j];
            div += sc.g[j] * trace[j] + big_s[j] * sc.dg[j];
        }
        parts.score = inv_n * (0.5 * quad + cross + div);
        if !parts.score.is_finite() {
            return Err(Error::non_finite(format!("score-matching term (group {group})")));
        }
    }

    let mut curv = vec![0.0; d * d];
    if lambda != 0.0 {
        for i in 0..n {
            let s = &sc.s[i * d..(i + 1) * d];
            let jac = &sc.jac[i * d * d..(i + 1) * d * d];
            for k in 0..d {
                for l in 0..d {
                    curv[k * d + l] += s[k] * s[l] + jac[k * d + l];
                }
            }
        }
        curv.iter_mut().for_each(|c| *c *= inv_n);
        parts.penalty = lambda * curv.iter().map(|c| c * c).sum::<f64>();
        if !parts.penalty.is_finite() {
            return Err(Error::non_finite(format!("curvature penalty (group {group})")));
        }
    }

    let Some(grad) = grad else {
        return Ok(parts);
    };
    // adjoint shared by all observations from the score term
    let mut shared_s = vec![0.0; d];
    let mut shared_j = vec![0.0; d * d];
    if score_on {
        for j in 0..d {
            shared_s[j] = scale * inv_n * (sc.g[j] * big_s[j] + sc.g[j] * lg[j] + sc.dg[j]);
            shared_j[j * d + j] = scale * inv_n * sc.g[j];
        }
    }
    // curvature adjoints: dP/dC = 2 lambda C
    let gbar: Vec<f64> = curv.iter().map(|c| 2.0 * lambda * c * scale * inv_n).collect();
    for i in 0..n {
        sc.adj_s.copy_from_slice(&shared_s);
        sc.adj_j.copy_from_slice(&shared_j);
        if lambda != 0.0 {
            let s = &sc.s[i * d..(i + 1) * d];
            for k in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += (gbar[k * d + l] + gbar[l * d + k]) * s[l];
                }
                sc.adj_s[k] += acc;
            }
            for (a, g) in sc.adj_j.iter_mut().zip(&gbar) {
                *a += g;
            }
        }
        if single_pass {
            ev.backprop_last(&sc.adj_s, &sc.adj_j, grad)?;
        } else {
            ev.backprop(theta, table.obs(group, i), &sc.adj_s, &sc.adj_j, grad)?;
        }
    }
    Ok(parts)
}

fn check_table(spec: &NetSpec, table: &ReferenceTable) -> Result<()> {
    if spec.theta_dim != table.theta.cols {
        return Err(Error::dim("table theta columns", spec.theta_dim, table.theta.cols));
    }
    if spec.data_dim != table.data.cols {
        return Err(Error::dim("table data columns", spec.data_dim, table.data.cols));
    }
    if spec.output_dim != spec.theta_dim {
        return Err(Error::Input("score networks need output_dim == theta_dim".into()));
    }
    Ok(())
}

/// Score-matching loss on a set of groups with optional weights and
/// curvature penalty. With `group_size == 1`, no weight and `lambda == 0` this
/// is the naive implicit loss; with `group_size == n` it is the full-data loss.
pub struct ScoreObjective<'a> {
    pub table: &'a ReferenceTable,
    pub groups: &'a [usize],
    pub weight: Option<&'a dyn WeightFn>,
    pub lambda: f64,
}

impl<'a> ScoreObjective<'a> {
    pub fn new(table: &'a ReferenceTable, groups: &'a [usize]) -> Self {
        Self { table, groups, weight: None, lambda: 0.0 }
    }

    pub fn with_weight(mut self, weight: &'a dyn WeightFn) -> Self {
        self.weight = Some(weight);
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    /// Mean score term and mean penalty, adding the gradient of their sum.
    pub fn parts(&self, spec: &NetSpec, w: &[f64], mut grad: Option<&mut [f64]>) -> Result<LossParts> {
        check_table(spec, self.table)?;
        if self.groups.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut ev = Evaluator::new(spec, w)?;
        let mut sc = Scratch::new(spec.theta_dim, self.table.group_size);
        let scale = 1.0 / self.groups.len() as f64;
        let mut total = LossParts::default();
        for &g in self.groups {
            let p = group_loss(&mut ev, self.table, g, self.weight, true, self.lambda, scale, &mut sc, grad.as_deref_mut())?;
            total.score += p.score * scale;
            total.penalty += p.penalty * scale;
        }
        Ok(total)
    }
}

impl Objective for ScoreObjective<'_> {
    fn evaluate(&self, spec: &NetSpec, w: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        Ok(self.parts(spec, w, grad)?.total())
    }
}

/// Mean over repeated-draw groups of `|| (1/m) sum_i (s s^T + grad s) ||_F^2`.
pub fn curvature_penalty(
    spec: &NetSpec,
    w: &[f64],
    table: &ReferenceTable,
    groups: &[usize],
    lambda: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_table(spec, table)?;
    if groups.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut ev = Evaluator::new(spec, w)?;
    let mut sc = Scratch::new(spec.theta_dim, table.group_size);
    let scale = 1.0 / groups.len() as f64;
    let mut total = 0.0;
    for &g in groups {
        total += scale * group_loss(&mut ev, table, g, None, false, lambda, scale, &mut sc, grad.as_deref_mut())?.penalty;
    }
    Ok(total)
}

/// Naive loss on single-observation groups plus `lambda1` times the
/// curvature penalty averaged over repeated-draw groups.
pub struct RegularizedSingleObjective<'a> {
    pub single: &'a ReferenceTable,
    pub single_groups: &'a [usize],
    /// Weights the score term only.
    pub weight: Option<&'a dyn WeightFn>,
    pub regression: &'a ReferenceTable,
    pub regression_groups: &'a [usize],
    pub lambda1: f64,
}

impl RegularizedSingleObjective<'_> {
    pub fn parts(&self, spec: &NetSpec, w: &[f64], mut grad: Option<&mut [f64]>) -> Result<LossParts> {
        let obj = ScoreObjective { weight: self.weight, ..ScoreObjective::new(self.single, self.single_groups) };
        let score = obj.parts(spec, w, grad.as_deref_mut())?.score;
        let penalty = if self.lambda1 == 0.0 || self.regression_groups.is_empty() {
            0.0
        } else {
            curvature_penalty(spec, w, self.regression, self.regression_groups, self.lambda1, grad)?
        };
        Ok(LossParts { score, penalty })
    }
}

impl Objective for RegularizedSingleObjective<'_> {
    fn evaluate(&self, spec: &NetSpec, w: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        Ok(self.parts(spec, w, grad)?.total())
    }
}

/// Regression of a mean network `h(theta)` onto per-group average scores
/// `sbar`, with penalty `lambda2 || h h^T - grad h - sbar h^T - h sbar^T ||_F^2`.
pub struct MeanRegressionObjective<'a> {
    /// `G x d`.
    pub theta: &'a Matrix,
    /// `G x d` group means of the fixed score network.
    pub targets: &'a Matrix,
    pub groups: &'a [usize],
    pub lambda2: f64,
}

impl MeanRegressionObjective<'_> {
    pub fn parts(&self, spec: &NetSpec, w: &[f64], mut grad: Option<&mut [f64]>) -> Result<LossParts> {
        let d = spec.theta_dim;
        if spec.data_dim != 0 || spec.output_dim != d {
            return Err(Error::Input("mean networks take theta only and return a theta-sized vector".into()));
        }
        if self.theta.cols != d || self.targets.cols != d {
            return Err(Error::dim("mean regression columns", d, self.theta.cols));
        }
        if self.groups.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut ev = Evaluator::new(spec, w)?;
        let scale = 1.0 / self.groups.len() as f64;
        let mut total = LossParts::default();
        let mut a = vec![0.0; d * d];
        let mut adj_h = vec![0.0; d];
        let mut adj_j = vec![0.0; d * d];
        for &g in self.groups {
            let theta = self.theta.row(g);
            let sbar = self.targets.row(g);
            let (h, jac) = ev.eval(theta, &[])?;
            let resid: Vec<f64> = h.iter().zip(sbar).map(|(a, b)| a - b).collect();
            let fit: f64 = resid.iter().map(|r| r * r).sum();
            let mut pen = 0.0;
            if self.lambda2 != 0.0 {
                for k in 0..d {
                    for l in 0..d {
                        let v = h[k] * h[l] - jac[k * d + l] - sbar[k] * h[l] - h[k] * sbar[l];
                        a[k * d + l] = v;
                        pen += v * v;
                    }
                }
                pen *= self.lambda2;
            }
            if !fit.is_finite() {
                return Err(Error::non_finite(format!("mean regression residual (group {g})")));
            }
            if !pen.is_finite() {
                return Err(Error::non_finite(format!("mean regression penalty (group {g})")));
            }
            total.score += scale * fit;
            total.penalty += scale * pen;
            if let Some(gr) = grad.as_deref_mut() {
                for k in 0..d {
                    let mut acc = 0.0;
                    if self.lambda2 != 0.0 {
                        for l in 0..d {
                            acc += (a[k * d + l] + a[l * d + k]) * resid[l];
                        }
                    }
                    adj_h[k] = scale * (2.0 * resid[k] + 2.0 * self.lambda2 * acc);
                }
                for (aj, av) in adj_j.iter_mut().zip(&a) {
                    *aj = if self.lambda2 != 0.0 { -2.0 * self.lambda2 * scale * av } else { 0.0 };
                }
                ev.backprop_last(&adj_h, &adj_j, gr)?;
            }
        }
        Ok(total)
    }
}

impl Objective for MeanRegressionObjective<'_> {
    fn evaluate(&self, spec: &NetSpec, w: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        Ok(self.parts(spec, w, grad)?.total())
    }
}

/// Naive implicit loss on the listed single-observation groups.
pub fn naive_loss(spec: &NetSpec, w: &[f64], table: &ReferenceTable, groups: &[usize], grad: Option<&mut [f64]>) -> Result<f64> {
    if table.group_size != 1 {
        return Err(Error::Input("the naive loss takes single-observation groups".into()));
    }
    ScoreObjective::new(table, groups).evaluate(spec, w, grad)
}

/// Full-data loss with curvature penalty.
pub fn full_data_loss(
    spec: &NetSpec,
    w: &[f64],
    table: &ReferenceTable,
    groups: &[usize],
    lambda: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    ScoreObjective::new(table, groups).with_lambda(lambda).evaluate(spec, w, grad)
}

/// Weighted (boundary-corrected) loss.
pub fn weighted_loss(
    spec: &NetSpec,
    w: &[f64],
    table: &ReferenceTable,
    groups: &[usize],
    weight: &dyn WeightFn,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    ScoreObjective::new(table, groups).with_weight(weight).evaluate(spec, w, grad)
}

/// Regularized single-observation loss.
#[allow(clippy::too_many_arguments)]
pub fn regularized_single_loss(
    spec: &NetSpec,
    w: &[f64],
    single: &ReferenceTable,
    single_groups: &[usize],
    regression: &ReferenceTable,
    regression_groups: &[usize],
    lambda1: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    RegularizedSingleObjective { single, single_groups, weight: None, regression, regression_groups, lambda1 }.evaluate(spec, w, grad)
}
