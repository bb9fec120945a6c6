//! Boundary treatments for the implicit loss: weight functions vanishing on
//! the support boundary and interior-row filtering.

use serde::{Deserialize, Serialize};

use super::tables::ReferenceTable;
use crate::error::{Error, Result};
use crate::simulators::{PriorComponent, PriorSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryTreatment {
    None,
    WeightFunction,
    GaussianSmoothing {
        /// Absolute noise scale; `None` uses 0.05 times the pooled standard
        /// deviation of the observed data.
        sigma: Option<f64>,
        /// Noise replicates of the observed data at sampling time.
        replicates: usize,
    },
}

impl Default for BoundaryTreatment {
    fn default() -> Self {
        BoundaryTreatment::None
    }
}

/// A nonnegative per-coordinate weight `g(theta, data)` and its diagonal
/// derivative `dg_j / dtheta_j`.
pub trait WeightFn {
    /// `data` is the group's observations, row-major.
    fn eval(&self, theta: &[f64], data: &[f64], g: &mut [f64], dg: &mut [f64]) -> Result<()>;
}

/// Constant weights, mostly for testing.
pub struct ConstantWeight(pub f64);

impl WeightFn for ConstantWeight {
    fn eval(&self, _theta: &[f64], _data: &[f64], g: &mut [f64], dg: &mut [f64]) -> Result<()> {
        if self.0 < 0.0 {
            return Err(Error::Input("negative weight".into()));
        }
        g.iter_mut().for_each(|v| *v = self.0);
        dg.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }
}

/// An upper bound on one coordinate set by the data: `min(cap, min_ij x_ij)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataUpperBound {
    pub coord: usize,
    pub cap: f64,
}

impl DataUpperBound {
    pub fn bound(&self, data: &[f64]) -> f64 {
        data.iter().cloned().fold(self.cap, f64::min)
    }
}

/// Distance to the nearest face of `[lo_j, hi_j]`, divided by the half-width
/// so that `g_j` peaks at 1 in the middle. At the midpoint the derivative uses
/// the subgradient `sign(mid - theta_j) / half`, which is 0 there.
///
/// With `ramp` set, the distance is divided by `ramp` instead and capped at 1,
/// so rows more than `ramp` inside the box get full weight.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDistanceWeight {
    pub bounds: Vec<(f64, f64)>,
    pub data_upper: Option<DataUpperBound>,
    pub ramp: Option<f64>,
}

impl BoxDistanceWeight {
    pub fn from_prior(prior: &PriorSpec, data_upper: Option<DataUpperBound>) -> Self {
        Self { bounds: prior.bounds(), data_upper, ramp: None }
    }

    pub fn with_ramp(mut self, ramp: f64) -> Result<Self> {
        if !(ramp > 0.0 && ramp.is_finite()) {
            return Err(Error::Config(format!("weight ramp must be positive, got {ramp}")));
        }
        self.ramp = Some(ramp);
        Ok(self)
    }
}

impl WeightFn for BoxDistanceWeight {
    fn eval(&self, theta: &[f64], data: &[f64], g: &mut [f64], dg: &mut [f64]) -> Result<()> {
        if theta.len() != self.bounds.len() {
            return Err(Error::dim("weight theta", self.bounds.len(), theta.len()));
        }
        for j in 0..theta.len() {
            let (lo, mut hi) = self.bounds[j];
            if let Some(u) = &self.data_upper {
                if u.coord == j {
                    hi = hi.min(u.bound(data));
                }
            }
            let t = theta[j];
            if !(t > lo && t < hi) {
                g[j] = 0.0;
                dg[j] = 0.0;
                continue;
            }
            if let Some(r) = self.ramp {
                let (dist, sign) = if t - lo <= hi - t { (t - lo, 1.0) } else { (hi - t, -1.0) };
                g[j] = (dist / r).min(1.0);
                dg[j] = if dist < r { sign / r } else { 0.0 };
                continue;
            }
            if hi.is_infinite() {
                let dist = t - lo;
                g[j] = dist.min(1.0);
                dg[j] = if dist < 1.0 { 1.0 } else { 0.0 };
                continue;
            }
            let half = 0.5 * (hi - lo);
            let mid = lo + half;
            g[j] = (t - lo).min(hi - t) / half;
            dg[j] = if t < mid {
                1.0 / half
            } else if t > mid {
                -1.0 / half
            } else {
                0.0
            };
        }
        Ok(())
    }
}

/// Groups whose parameter is at least `tol` away from every uniform-prior
/// face, and the number dropped.
pub fn interior_groups(table: &ReferenceTable, prior: &PriorSpec, groups: &[usize], tol: f64) -> (Vec<usize>, usize) {
    let kept: Vec<usize> = groups
        .iter()
        .copied()
        .filter(|&g| {
            table.theta.row(g).iter().zip(&prior.components).all(|(t, c)| match *c {
                PriorComponent::Uniform { low, high } => t - low > tol && high - t > tol,
                _ => true,
            })
        })
        .collect();
    let dropped = groups.len() - kept.len();
    (kept, dropped)
}
