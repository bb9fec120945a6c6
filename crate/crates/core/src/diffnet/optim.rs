use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule for [`AdamState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Piecewise-constant geometric decay from `start` to `end` over
    /// `total_steps`, in `stages` equal blocks.
    StepDecay {
        start: f64,
        end: f64,
        stages: usize,
        total_steps: usize,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepDecay {
                start,
                end,
                stages,
                total_steps,
            } => {
                if stages <= 1 || total_steps == 0 {
                    return start;
                }
                let stage = (step.min(total_steps - 1) * stages / total_steps).min(stages - 1);
                let frac = stage as f64 / (stages - 1) as f64;
                start * (end / start).powf(frac)
            }
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, schedule: LrSchedule) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// One update of `w` in place.
    pub fn step(&mut self, w: &mut [f64], grad: &[f64]) -> Result<()> {
        self.step_scaled(w, grad, None)
    }

    /// Like [`step`](Self::step) with a per-coordinate multiplier on the
    /// learning rate.
    pub fn step_scaled(&mut self, w: &mut [f64], grad: &[f64], lr_scale: Option<&[f64]>) -> Result<()> {
        if w.len() != self.m.len() {
            return Err(Error::dim("optimizer weights", self.m.len(), w.len()));
        }
        if grad.len() != w.len() {
            return Err(Error::dim("optimizer gradient", w.len(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::non_finite(format!("gradient[{i}]")));
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..w.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let scale = lr_scale.map_or(1.0, |s| s[i]);
            w[i] -= lr * scale * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut st = AdamState::new(3, LrSchedule::Constant { lr: 0.1 });
        let mut w = vec![1.0, -2.0, 0.5];
        st.step(&mut w, &[0.0; 3]).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_positive_gradient_decreases_every_step() {
        let mut st = AdamState::new(1, LrSchedule::Constant { lr: 0.01 });
        let mut w = vec![0.0];
        let mut prev = w[0];
        for _ in 0..200 {
            st.step(&mut w, &[3.0]).unwrap();
            assert!(w[0] < prev);
            prev = w[0];
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut st = AdamState::new(1, LrSchedule::Constant { lr: 0.1 });
        let mut w = vec![0.0];
        st.step(&mut w, &[1.0]).unwrap();
        assert!((w[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut st = AdamState::new(2, LrSchedule::Constant { lr: 0.1 });
        assert!(st.step(&mut [0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn step_decay_hits_endpoints() {
        let s = LrSchedule::StepDecay {
            start: 1e-3,
            end: 1e-5,
            stages: 3,
            total_steps: 300,
        };
        assert_eq!(s.lr_at(0), 1e-3);
        assert!((s.lr_at(150) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(299) - 1e-5).abs() < 1e-18);
        assert!((s.lr_at(10_000) - 1e-5).abs() < 1e-18);
    }
}
