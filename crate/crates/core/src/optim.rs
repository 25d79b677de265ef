//! Adam and the three-phase OneCycle learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// The gradient is checked before any buffer is touched, so a rejected
    /// step leaves both the parameters and the state unchanged.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_dim("adam parameters", self.m.len(), params.len())?;
        check_dim("adam gradients", self.m.len(), grads.len())?;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidInput(format!("learning rate must be positive, got {lr}")));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// OneCycle learning-rate schedule with cosine interpolation inside each phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub total_steps: usize,
    pub three_phase: bool,
}

impl OneCycleSchedule {
    /// Schedule with warmup 15%, div factor 10, final div factor 100, three phases.
    pub fn new(max_lr: f64, total_steps: usize) -> Result<Self> {
        let s = OneCycleSchedule {
            max_lr,
            pct_start: 0.15,
            div_factor: 10.0,
            final_div_factor: 100.0,
            total_steps,
            three_phase: true,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return Err(Error::InvalidInput(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 0.5) {
            return Err(Error::InvalidInput(format!(
                "pct_start must lie in (0, 0.5), got {}",
                self.pct_start
            )));
        }
        if !(self.div_factor > 1.0 && self.final_div_factor > 1.0) {
            return Err(Error::InvalidInput("div factors must exceed 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidInput("total_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn min_lr(&self) -> f64 {
        self.initial_lr() / self.final_div_factor
    }

    /// Learning rate at step `t` (0-based).
    pub fn lr(&self, t: usize) -> Result<f64> {
        if t >= self.total_steps {
            return Err(Error::InvalidInput(format!(
                "step {t} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let total = self.total_steps as f64;
        let warm_end = self.pct_start * total - 1.0;
        // (end step, start lr, end lr)
        let phases: Vec<(f64, f64, f64)> = if self.three_phase {
            vec![
                (warm_end, self.initial_lr(), self.max_lr),
                (2.0 * self.pct_start * total - 2.0, self.max_lr, self.initial_lr()),
                (total - 1.0, self.initial_lr(), self.min_lr()),
            ]
        } else {
            vec![
                (warm_end, self.initial_lr(), self.max_lr),
                (total - 1.0, self.max_lr, self.min_lr()),
            ]
        };
        let step = t as f64;
        let mut start_step = 0.0;
        let last = phases.len() - 1;
        for (i, &(end_step, from, to)) in phases.iter().enumerate() {
            if step <= end_step || i == last {
                let span = end_step - start_step;
                let pct = if span > 0.0 {
                    ((step - start_step) / span).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                return Ok(cosine_anneal(from, to, pct));
            }
            start_step = end_step;
        }
        unreachable!("last phase always matches")
    }
}

fn cosine_anneal(from: f64, to: f64, pct: f64) -> f64 {
    to + (from - to) / 2.0 * ((PI * pct).cos() + 1.0)
}
