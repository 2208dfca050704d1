use std::f64::consts::PI;
use std::ops::Range;

use super::ModelError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Cosine decay from `eta` at step 0 to zero at step `total`.
pub fn cosine_lr(t: usize, total: usize, eta: f64) -> Result<f64, ModelError> {
    if total == 0 {
        return Err(ModelError::ZeroTotalSteps);
    }
    if t > total {
        return Err(ModelError::ScheduleExhausted { step: t, total });
    }
    Ok(eta * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos()))
}

/// Learning rate and decoupled weight decay for a slice of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RateGroup {
    pub range: Range<usize>,
    pub eta: f64,
    pub delta: f64,
}

/// AdamW state with a cosine schedule over `total_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    step: usize,
    total_steps: usize,
    first: Vec<f64>,
    second: Vec<f64>,
    groups: Vec<RateGroup>,
}

impl OptState {
    /// One rate group covering all `n` parameters.
    pub fn new(n: usize, eta: f64, delta: f64, total_steps: usize) -> Result<Self, ModelError> {
        Self::grouped(
            n,
            vec![RateGroup {
                range: 0..n,
                eta,
                delta,
            }],
            total_steps,
        )
    }

    /// Groups must tile `0..n` without overlap (any order).
    pub fn grouped(
        n: usize,
        mut groups: Vec<RateGroup>,
        total_steps: usize,
    ) -> Result<Self, ModelError> {
        if total_steps == 0 {
            return Err(ModelError::ZeroTotalSteps);
        }
        groups.sort_by_key(|g| g.range.start);
        let mut next = 0;
        for g in &groups {
            if g.range.start != next || g.range.end < g.range.start {
                return Err(ModelError::BadRateGroups);
            }
            if !(g.eta.is_finite() && g.eta >= 0.0 && g.delta.is_finite() && g.delta >= 0.0) {
                return Err(ModelError::BadRateGroups);
            }
            next = g.range.end;
        }
        if next != n {
            return Err(ModelError::BadRateGroups);
        }
        Ok(Self {
            step: 0,
            total_steps,
            first: vec![0.0; n],
            second: vec![0.0; n],
            groups,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// One decoupled AdamW update of `params` in place.
    pub fn adamw_step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), ModelError> {
        if grad.len() != params.len() || params.len() != self.first.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.first.len(),
                got: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(ModelError::NonFiniteGradient { index: i });
        }
        if self.step >= self.total_steps {
            return Err(ModelError::ScheduleExhausted {
                step: self.step + 1,
                total: self.total_steps,
            });
        }
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for g in &self.groups {
            let lr = cosine_lr(self.step, self.total_steps, g.eta)?;
            for i in g.range.clone() {
                self.first[i] = BETA1 * self.first[i] + (1.0 - BETA1) * grad[i];
                self.second[i] = BETA2 * self.second[i] + (1.0 - BETA2) * grad[i] * grad[i];
                let m_hat = self.first[i] / c1;
                let v_hat = self.second[i] / c2;
                params[i] -= lr * (m_hat / (v_hat.sqrt() + EPSILON)) + lr * g.delta * params[i];
            }
        }
        self.step += 1;
        Ok(())
    }
}
