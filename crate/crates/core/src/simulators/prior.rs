//! Independent per-coordinate priors.

use rand::Rng as _;
use rand_distr::{Beta, Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorComponent {
    Uniform { low: f64, high: f64 },
    Beta { alpha: f64, beta: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl PriorComponent {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriorComponent::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            PriorComponent::Beta { alpha, beta } => alpha > 0.0 && beta > 0.0,
            PriorComponent::LogNormal { mu, sigma } => mu.is_finite() && sigma > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid prior component {self:?}")))
        }
    }

    /// Closed support `[lo, hi]` (possibly unbounded above).
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            PriorComponent::Uniform { low, high } => (low, high),
            PriorComponent::Beta { .. } => (0.0, 1.0),
            PriorComponent::LogNormal { .. } => (0.0, f64::INFINITY),
        }
    }

    fn log_density_grad(&self, t: f64) -> Result<(f64, f64)> {
        let outside = || Error::Domain(format!("{t} outside the support of {self:?}"));
        match *self {
            PriorComponent::Uniform { low, high } => {
                if !(low..=high).contains(&t) {
                    return Err(outside());
                }
                Ok((-(high - low).ln(), 0.0))
            }
            PriorComponent::Beta { alpha, beta } => {
                if !(t > 0.0 && t < 1.0) {
                    return Err(outside());
                }
                let lp = (alpha - 1.0) * t.ln() + (beta - 1.0) * (-t).ln_1p() - ln_beta(alpha, beta);
                Ok((lp, (alpha - 1.0) / t - (beta - 1.0) / (1.0 - t)))
            }
            PriorComponent::LogNormal { mu, sigma } => {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(outside());
                }
                let z = (t.ln() - mu) / sigma;
                let lp = -t.ln() - 0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                Ok((lp, -1.0 / t - z / (sigma * t)))
            }
        }
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            PriorComponent::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            PriorComponent::Beta { alpha, beta } => Beta::new(alpha, beta).unwrap().sample(rng),
            PriorComponent::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).unwrap().sample(rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorSpec {
    pub components: Vec<PriorComponent>,
}

impl PriorSpec {
    pub fn new(components: Vec<PriorComponent>) -> Self {
        Self { components }
    }

    pub fn uniform(bounds: &[(f64, f64)]) -> Self {
        Self::new(bounds.iter().map(|&(low, high)| PriorComponent::Uniform { low, high }).collect())
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("prior has no coordinates".into()));
        }
        self.components.iter().try_for_each(PriorComponent::validate)
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.components.iter().map(PriorComponent::bounds).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.bounds())
                .all(|(t, (lo, hi))| *t >= lo && *t <= hi)
    }

    /// Log density and its gradient.
    pub fn log_density_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.dim() {
            return Err(Error::dim("prior theta", self.dim(), theta.len()));
        }
        let mut lp = 0.0;
        let mut g = Vec::with_capacity(theta.len());
        for (c, &t) in self.components.iter().zip(theta) {
            let (l, d) = c.log_density_grad(t)?;
            lp += l;
            g.push(d);
        }
        Ok((lp, g))
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.log_density_grad(theta).map_or(f64::NEG_INFINITY, |(lp, _)| lp)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.components.iter().map(|c| c.sample(rng)).collect()
    }

    /// True when every coordinate has a flat density.
    pub fn is_flat(&self) -> bool {
        self.components.iter().all(|c| matches!(c, PriorComponent::Uniform { .. }))
    }
}

/// Fold `t` back into `[lo, hi]` by mirror reflection across violated faces.
pub fn reflect(t: f64, lo: f64, hi: f64) -> f64 {
    if t >= lo && t <= hi {
        return t;
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => {
            let w = hi - lo;
            let r = (t - lo).rem_euclid(2.0 * w);
            if r <= w {
                lo + r
            } else {
                hi - (r - w)
            }
        }
        (true, false) => lo + (lo - t),
        (false, true) => hi - (t - hi),
        (false, false) => t,
    }
}
