//! Diagonal Gaussian fitted by a weighted variational objective
//! `KL(q || prior) + sum_i w_i * NLL_i(q, data)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::data::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self, ModelError> {
        if mean.is_empty() || mean.len() != log_var.len() {
            return Err(ModelError::DimensionMismatch {
                expected: mean.len(),
                got: log_var.len(),
            });
        }
        Ok(Self { mean, log_var })
    }

    /// Zero mean, unit variance in every dimension.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn from_variances(mean: Vec<f64>, var: &[f64]) -> Result<Self, ModelError> {
        Self::new(mean, var.iter().map(|v| v.ln()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }
}

fn kl_dim(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    0.5 * ((lq - lp).exp() + (mq - mp) * (mq - mp) * (-lp).exp() - 1.0 + lp - lq)
}

pub fn kl_diag_gaussians(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64, ModelError> {
    if q.dim() != p.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok((0..q.dim())
        .map(|i| kl_dim(q.mean[i], q.log_var[i], p.mean[i], p.log_var[i]))
        .sum())
}

/// Mean per-sample negative log-likelihood of each dimension.
pub fn gaussian_nll_per_dim(q: &DiagGaussian, data: &Matrix) -> Result<Vec<f64>, ModelError> {
    if data.cols() != q.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: q.dim(),
            got: data.cols(),
        });
    }
    if data.rows() == 0 {
        return Err(ModelError::EmptyData);
    }
    let mut acc = vec![0.0; q.dim()];
    for row in data.iter_rows() {
        for (i, x) in row.iter().enumerate() {
            let var = q.log_var[i].exp();
            let r = x - q.mean[i];
            acc[i] += 0.5 * ((2.0 * PI * var).ln() + r * r / var);
        }
    }
    let n = data.rows() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Per-dimension sample mean and mean squared deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentStats {
    pub mean: Vec<f64>,
    pub spread: Vec<f64>,
}

impl MomentStats {
    pub fn from_matrix(data: &Matrix) -> Result<Self, ModelError> {
        if data.rows() == 0 {
            return Err(ModelError::EmptyData);
        }
        let n = data.rows() as f64;
        let d = data.cols();
        let mut mean = vec![0.0; d];
        for row in data.iter_rows() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut spread = vec![0.0; d];
        for row in data.iter_rows() {
            for ((s, x), m) in spread.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        spread.iter_mut().for_each(|s| *s /= n);
        Ok(Self { mean, spread })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean NLL of dimension `i` under `N(mu, exp(log_var))`.
    pub fn nll(&self, i: usize, mu: f64, log_var: f64) -> f64 {
        let r = self.mean[i] - mu;
        0.5 * ((2.0 * PI).ln() + log_var + (self.spread[i] + r * r) * (-log_var).exp())
    }

    pub fn nll_all(&self, q: &DiagGaussian) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.nll(i, q.mean[i], q.log_var[i]))
            .collect()
    }
}

/// Value of `KL(q || prior) + sum_i w_i NLL_i`.
pub fn vb_objective(
    q: &DiagGaussian,
    prior: &DiagGaussian,
    stats: &MomentStats,
    weights: &[f64],
) -> f64 {
    (0..q.dim())
        .map(|i| dim_objective(q.mean[i], q.log_var[i], prior, stats, weights[i], i))
        .sum()
}

fn dim_objective(
    mu: f64,
    lv: f64,
    prior: &DiagGaussian,
    stats: &MomentStats,
    w: f64,
    i: usize,
) -> f64 {
    let kl = kl_dim(mu, lv, prior.mean[i], prior.log_var[i]);
    if w == 0.0 {
        kl
    } else {
        kl + w * stats.nll(i, mu, lv)
    }
}

/// Settings for [`vb_fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VbSettings {
    pub steps: usize,
    /// Initial (and maximum) step size of every coordinate.
    pub lr: f64,
}

impl Default for VbSettings {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.5,
        }
    }
}

const MAX_HALVINGS: usize = 60;

/// Gradient descent on `(mean, log_var)` starting from the prior.
///
/// The objective separates across dimensions, and each scalar coordinate keeps
/// its own step size: a step that raises the objective is halved until it no
/// longer does, and accepted steps let the size grow back toward `lr`. Every
/// accepted step is therefore non-increasing. `observe` sees the iterate
/// after every step (and once before the first).
pub fn vb_fit_observed<F>(
    prior: &DiagGaussian,
    stats: &MomentStats,
    weights: &[f64],
    settings: VbSettings,
    mut observe: F,
) -> Result<DiagGaussian, ModelError>
where
    F: FnMut(usize, &DiagGaussian),
{
    let d = prior.dim();
    if stats.dim() != d || weights.len() != d {
        return Err(ModelError::DimensionMismatch {
            expected: d,
            got: if stats.dim() != d {
                stats.dim()
            } else {
                weights.len()
            },
        });
    }
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(ModelError::NegativeWeight { index: i });
    }
    let mut q = prior.clone();
    let mut mean_step = vec![settings.lr; d];
    let mut var_step = vec![settings.lr; d];
    observe(0, &q);
    for step in 1..=settings.steps {
        for i in 0..d {
            let w = weights[i];
            let (mp, lp) = (prior.mean[i], prior.log_var[i]);
            let f = |mu: f64, lv: f64| dim_objective(mu, lv, prior, stats, w, i);

            // mean coordinate
            let (mu, lv) = (q.mean[i], q.log_var[i]);
            let current = f(mu, lv);
            if !current.is_finite() {
                return Err(ModelError::NonFiniteObjective);
            }
            let g_mu = (mu - mp) * (-lp).exp() - w * (stats.mean[i] - mu) * (-lv).exp();
            let current = descend(
                &mut q.mean[i],
                g_mu,
                &mut mean_step[i],
                settings.lr,
                current,
                |m| f(m, lv),
            );

            // log-variance coordinate
            let mu = q.mean[i];
            let lv = q.log_var[i];
            let r = stats.mean[i] - mu;
            let g_lv = 0.5 * ((lv - lp).exp() - 1.0)
                + w * 0.5 * (1.0 - (stats.spread[i] + r * r) * (-lv).exp());
            descend(
                &mut q.log_var[i],
                g_lv,
                &mut var_step[i],
                settings.lr,
                current,
                |l| f(mu, l),
            );
        }
        observe(step, &q);
    }
    Ok(q)
}

fn descend<F: Fn(f64) -> f64>(
    x: &mut f64,
    grad: f64,
    step: &mut f64,
    max_step: f64,
    current: f64,
    f: F,
) -> f64 {
    if grad == 0.0 || !grad.is_finite() {
        return current;
    }
    for _ in 0..MAX_HALVINGS {
        let candidate = *x - *step * grad;
        let value = f(candidate);
        if value.is_finite() && value <= current {
            *x = candidate;
            *step = (*step * 1.5).min(max_step);
            return value;
        }
        *step *= 0.5;
    }
    current
}

/// Fits `q` to `data` from the prior; see [`vb_fit_observed`].
pub fn vb_fit(
    prior: &DiagGaussian,
    data: &Matrix,
    dim_weights: &[f64],
    settings: VbSettings,
) -> Result<DiagGaussian, ModelError> {
    let stats = MomentStats::from_matrix(data)?;
    vb_fit_observed(prior, &stats, dim_weights, settings, |_, _| {})
}
