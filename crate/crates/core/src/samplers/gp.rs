//! Gaussian-process expected improvement with a fixed squared-exponential
//! kernel in unit coordinates.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{completed_units, random_suggest, SamplerError, TrialRecord};
use crate::rng;
use crate::searchspace::{ParamAssignment, SearchSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    pub length_scale: f64,
    pub jitter: f64,
    /// How many times the jitter may double before giving up.
    pub jitter_doublings: usize,
    pub n_random: usize,
    pub n_local: usize,
    /// Standard deviation of the local perturbations around the incumbent.
    pub local_scale: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            length_scale: 0.2,
            jitter: 1e-6,
            jitter_doublings: 3,
            n_random: 512,
            n_local: 64,
            local_scale: 0.05,
        }
    }
}

/// Posterior of a zero-mean GP on standardized objectives.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    xs: Vec<Vec<f64>>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    length_scale: f64,
    /// Standardized objectives.
    pub targets: Vec<f64>,
}

fn kernel(a: &[f64], b: &[f64], ls: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2 / (ls * ls)).exp()
}

impl GpPosterior {
    /// Fits the GP, doubling the diagonal jitter on Cholesky failure.
    pub fn fit(xs: Vec<Vec<f64>>, ys: &[f64], cfg: &GpConfig) -> Result<Self, SamplerError> {
        let n = xs.len();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let targets: Vec<f64> = ys.iter().map(|y| (y - mean) / sd).collect();
        let base = DMatrix::from_fn(n, n, |i, j| kernel(&xs[i], &xs[j], cfg.length_scale));
        let mut jitter = cfg.jitter;
        for attempt in 0..=cfg.jitter_doublings {
            if attempt > 0 {
                jitter *= 2.0;
            }
            let k = &base + DMatrix::identity(n, n) * jitter;
            if let Some(chol) = k.cholesky() {
                let alpha = chol.solve(&DVector::from_column_slice(&targets));
                return Ok(Self {
                    xs,
                    chol,
                    alpha,
                    length_scale: cfg.length_scale,
                    targets,
                });
            }
        }
        Err(SamplerError::NotPositiveDefinite(jitter))
    }

    /// Posterior mean and standard deviation at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().map(|xi| kernel(xi, x, self.length_scale)),
        );
        let mean = k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = (1.0 - k.dot(&v)).max(0.0);
        (mean, var.sqrt())
    }
}

/// Expected improvement over `best` for a maximization problem.
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    let gain = mean - best;
    if sd <= 1e-12 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    let n = Normal::standard();
    gain * n.cdf(z) + sd * n.pdf(z)
}

/// GP-EI suggestion; prior sampling until two trials have completed.
pub fn gp_ei_suggest(
    history: &[TrialRecord],
    space: &SearchSpace,
    cfg: &GpConfig,
    seed: u64,
) -> Result<ParamAssignment, SamplerError> {
    let done = completed_units(history, space)?;
    if done.len() < 2 {
        return Ok(random_suggest(space, seed));
    }
    if !(cfg.length_scale > 0.0 && cfg.jitter > 0.0) || cfg.n_random + cfg.n_local == 0 {
        return Err(SamplerError::InvalidConfig(
            "gp settings must be positive".into(),
        ));
    }
    let ys: Vec<f64> = done.iter().map(|d| d.1).collect();
    let incumbent = done
        .iter()
        .fold(&done[0], |b, d| if d.1 > b.1 { d } else { b })
        .0
        .clone();
    let gp = GpPosterior::fit(done.into_iter().map(|d| d.0).collect(), &ys, cfg)?;
    let best = gp.targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut r = rng::stream(&[seed, 0x6e1]);
    let dims: Vec<_> = space.iter().map(|(_, d)| *d).collect();
    let mut candidates = Vec::with_capacity(cfg.n_random + cfg.n_local);
    for _ in 0..cfg.n_random {
        candidates.push(
            dims.iter()
                .map(|d| d.snap_unit(r.random::<f64>()))
                .collect::<Vec<f64>>(),
        );
    }
    for _ in 0..cfg.n_local {
        candidates.push(
            incumbent
                .iter()
                .zip(&dims)
                .map(|(x, d)| {
                    let step: f64 = r.sample(StandardNormal);
                    d.snap_unit((x + cfg.local_scale * step).clamp(0.0, 1.0))
                })
                .collect(),
        );
    }
    let mut chosen = 0;
    let mut top = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let (m, s) = gp.predict(c);
        let ei = expected_improvement(m, s, best);
        if ei > top {
            top = ei;
            chosen = i;
        }
    }
    Ok(space.from_unit(&candidates[chosen])?)
}
