//! Tree-structured Parzen estimator over a flat space: one good and one bad
//! density per dimension, candidates drawn from the good density and ranked
//! by the density ratio.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{completed_units, random_suggest, SamplerError, TrialRecord};
use crate::rng;
use crate::searchspace::{ParamAssignment, SearchSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeConfig {
    /// Fraction of completed trials treated as good.
    pub gamma: f64,
    /// Completed trials required before modelling starts.
    pub n_startup: usize,
    pub n_candidates: usize,
    pub bandwidth_floor: f64,
    /// Mass of the uniform component, in units of one observation.
    pub prior_weight: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            n_startup: 10,
            n_candidates: 24,
            bandwidth_floor: 1e-3,
            prior_weight: 1.0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if self.n_startup == 0 || self.n_candidates == 0 {
            return bad("n_startup and n_candidates must be positive");
        }
        if !(self.bandwidth_floor.is_finite() && self.bandwidth_floor > 0.0) {
            return bad("bandwidth_floor must be positive");
        }
        if !(self.prior_weight.is_finite() && self.prior_weight >= 0.0) {
            return bad("prior_weight must be nonnegative");
        }
        Ok(())
    }
}

/// Splits completed trials into the top `ceil(gamma * n)` (at least one) and
/// the rest. Ties in the objective go to the earlier trial.
pub fn split_good_bad(
    history: &[TrialRecord],
    gamma: f64,
) -> Result<(Vec<&TrialRecord>, Vec<&TrialRecord>), SamplerError> {
    let mut done = super::completed(history);
    if done.is_empty() {
        return Err(SamplerError::EmptyHistory);
    }
    let n_good = good_count(done.len(), gamma);
    sort_best_first(&mut done, |r| (r.score().expect("completed"), r.trial_id));
    let bad = done.split_off(n_good);
    Ok((done, bad))
}

fn good_count(n: usize, gamma: f64) -> usize {
    // the small offset keeps exact products such as 0.3 * 10 from rounding up
    ((gamma * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

fn sort_best_first<T, F: Fn(&T) -> (f64, usize)>(items: &mut [T], key: F) {
    items.sort_by(|a, b| {
        let (va, ia) = key(a);
        let (vb, ib) = key(b);
        vb.total_cmp(&va).then(ia.cmp(&ib))
    });
}

/// Mixture of Gaussians truncated to `[0, 1]` plus a uniform component.
#[derive(Debug, Clone, PartialEq)]
pub struct ParzenDensity {
    means: Vec<f64>,
    bandwidths: Vec<f64>,
    /// Log of each kernel's truncation mass.
    log_mass: Vec<f64>,
    /// Mixture weights: one per kernel, then the uniform component last.
    weights: Vec<f64>,
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Builds the density of `points` in one unit coordinate. Each kernel's
/// bandwidth is the larger gap to its sorted neighbours (a lone point uses
/// the distance to the farther interval end), clipped below at
/// `max(bandwidth_floor, 1 / min(100, n + 1))` and above at 1.
pub fn parzen_density(points: &[f64], config: &TpeConfig) -> Result<ParzenDensity, SamplerError> {
    if points.is_empty() && config.prior_weight == 0.0 {
        return Err(SamplerError::EmptyDensity);
    }
    if let Some(p) = points.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(SamplerError::InvalidConfig(format!(
            "density point {p} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].total_cmp(&points[b]));
    let floor = (1.0 / (points.len() as f64 + 1.0).min(100.0)).max(config.bandwidth_floor);
    let mut bandwidths = vec![0.0; points.len()];
    for (k, &i) in order.iter().enumerate() {
        let left = (k > 0).then(|| points[i] - points[order[k - 1]]);
        let right = (k + 1 < order.len()).then(|| points[order[k + 1]] - points[i]);
        let gap = match (left, right) {
            (Some(l), Some(r)) => l.max(r),
            (Some(g), None) | (None, Some(g)) => g,
            (None, None) => points[i].max(1.0 - points[i]),
        };
        bandwidths[i] = gap.clamp(floor, 1.0);
    }
    let normal = std_normal();
    let log_mass = points
        .iter()
        .zip(&bandwidths)
        .map(|(m, s)| (normal.cdf((1.0 - m) / s) - normal.cdf(-m / s)).ln())
        .collect();
    let total = points.len() as f64 + config.prior_weight;
    let mut weights = vec![1.0 / total; points.len()];
    weights.push(config.prior_weight / total);
    Ok(ParzenDensity {
        means: points.to_vec(),
        bandwidths,
        log_mass,
        weights,
    })
}

impl ParzenDensity {
    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn log_pdf(&self, u: f64) -> f64 {
        if !(0.0..=1.0).contains(&u) {
            return f64::NEG_INFINITY;
        }
        let normal = std_normal();
        let mut terms: Vec<f64> = self
            .means
            .iter()
            .zip(&self.bandwidths)
            .zip(&self.log_mass)
            .zip(&self.weights)
            .map(|(((m, s), lm), w)| w.ln() + normal.ln_pdf((u - m) / s) - s.ln() - lm)
            .collect();
        // the uniform component has density 1 on the interval
        terms.push(self.weights[self.means.len()].ln());
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return top;
        }
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }

    pub fn pdf(&self, u: f64) -> f64 {
        self.log_pdf(u).exp()
    }

    /// Draws a component by weight, then inverts its truncated CDF.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let pick: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if pick < acc {
                comp = i;
                break;
            }
        }
        let v: f64 = rng.random();
        if comp == self.means.len() {
            return v;
        }
        let (m, s) = (self.means[comp], self.bandwidths[comp]);
        let normal = std_normal();
        let lo = normal.cdf(-m / s);
        let hi = normal.cdf((1.0 - m) / s);
        let p = (lo + v * (hi - lo)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        (m + s * normal.inverse_cdf(p)).clamp(0.0, 1.0)
    }
}

/// TPE suggestion. Falls back to [`random_suggest`] with the same seed until
/// `n_startup` trials have completed.
pub fn tpe_suggest(
    history: &[TrialRecord],
    space: &SearchSpace,
    config: &TpeConfig,
    seed: u64,
) -> Result<ParamAssignment, SamplerError> {
    config.validate()?;
    let done = completed_units(history, space)?;
    if done.len() < config.n_startup {
        return Ok(random_suggest(space, seed));
    }
    let n_good = good_count(done.len(), config.gamma);
    let mut ranked: Vec<&(Vec<f64>, f64, usize)> = done.iter().collect();
    sort_best_first(&mut ranked, |r| (r.1, r.2));
    let (good, bad) = ranked.split_at(n_good);

    let mut r = rng::stream(&[seed, 0x7e5e]);
    let mut u = Vec::with_capacity(space.len());
    for (d, (_, domain)) in space.iter().enumerate() {
        let gp: Vec<f64> = good.iter().map(|t| t.0[d]).collect();
        let bp: Vec<f64> = bad.iter().map(|t| t.0[d]).collect();
        let l = parzen_density(&gp, config)?;
        let g = parzen_density(&bp, config)?;
        let mut best: Option<(f64, f64)> = None;
        for _ in 0..config.n_candidates {
            let c = domain.snap_unit(l.sample(&mut r));
            let score = l.log_pdf(c) - g.log_pdf(c);
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, c));
            }
        }
        u.push(best.expect("at least one candidate").1);
    }
    Ok(space.from_unit(&u)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::{ParamDomain, SearchSpace};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_space() -> SearchSpace {
        SearchSpace::from_dims([("x", ParamDomain::Uniform { lo: 0.0, hi: 1.0 })]).unwrap()
    }

    fn history_1d(points: &[(f64, f64)]) -> Vec<TrialRecord> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                TrialRecord::completed(i, [("x".to_string(), x)].into_iter().collect(), y, i as u64)
            })
            .collect()
    }

    /// Composite Simpson rule with `n` (even) intervals.
    fn simpson<F: Fn(f64) -> f64>(f: F, n: usize) -> f64 {
        let h = 1.0 / n as f64;
        let mut acc = f(0.0) + f(1.0);
        for i in 1..n {
            acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn split_examples() {
        let h = history_1d(&(0..8).map(|i| (0.1, i as f64)).collect::<Vec<_>>());
        assert_eq!(split_good_bad(&h, 0.25).unwrap().0.len(), 2);
        let h1 = history_1d(&[(0.1, 1.0)]);
        let (g, b) = split_good_bad(&h1, 0.25).unwrap();
        assert_eq!((g.len(), b.len()), (1, 0));
        let h10 = history_1d(&(0..10).map(|i| (0.1, i as f64)).collect::<Vec<_>>());
        let (g, _) = split_good_bad(&h10, 0.3).unwrap();
        // brute-force oracle: the three largest objectives
        let mut objs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        objs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let got: Vec<f64> = g.iter().map(|r| r.objective.unwrap()).collect();
        assert_eq!(got, objs[..3].to_vec());
        assert_eq!(split_good_bad(&[], 0.25), Err(SamplerError::EmptyHistory));
    }

    #[test]
    fn split_breaks_ties_by_trial_id() {
        let h = history_1d(&[(0.1, 1.0), (0.2, 2.0), (0.3, 2.0), (0.4, 2.0)]);
        let (g, _) = split_good_bad(&h, 0.5).unwrap();
        assert_eq!(g.iter().map(|r| r.trial_id).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn density_examples() {
        let cfg = TpeConfig::default();
        let empty = parzen_density(&[], &cfg).unwrap();
        for u in [0.0, 0.3, 0.99] {
            assert!((empty.pdf(u) - 1.0).abs() < 1e-12);
        }
        let single = parzen_density(&[0.5], &cfg).unwrap();
        for k in 0..50 {
            let d = k as f64 / 100.0;
            assert!((single.pdf(0.5 + d) - single.pdf(0.5 - d)).abs() < 1e-9);
        }
        let zero = TpeConfig {
            prior_weight: 0.0,
            ..cfg
        };
        assert_eq!(parzen_density(&[], &zero), Err(SamplerError::EmptyDensity));
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for prior_weight in [0.0, 1.0, 3.0] {
            let cfg = TpeConfig {
                prior_weight,
                bandwidth_floor: 0.01,
                ..TpeConfig::default()
            };
            for n in [1, 3, 12] {
                let pts: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let d = parzen_density(&pts, &cfg).unwrap();
                let z = simpson(|u| d.pdf(u), 10_000);
                assert!((z - 1.0).abs() < 1e-6, "{z}");
            }
        }
    }

    #[test]
    fn startup_matches_prior_distribution() {
        // fewer completed trials than n_startup: suggestions are prior draws
        let space = unit_space();
        let h = history_1d(&[(0.9, 1.0), (0.91, 1.0)]);
        let cfg = TpeConfig::default();
        let mut xs: Vec<f64> = (0..5000)
            .map(|s| tpe_suggest(&h, &space, &cfg, s).unwrap().get("x").unwrap())
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 1.628 / n.sqrt(), "KS {ks}");
    }

    #[test]
    fn prefers_the_good_region() {
        let space = unit_space();
        let mut pts = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            pts.push((0.9 + 0.05 * (rng.random::<f64>() - 0.5), 1.0));
        }
        for _ in 0..30 {
            pts.push((0.1 + 0.05 * (rng.random::<f64>() - 0.5), 0.0));
        }
        let h = history_1d(&pts);
        let cfg = TpeConfig::default();
        let hits = (0..1000)
            .filter(|&s| tpe_suggest(&h, &space, &cfg, s).unwrap().get("x").unwrap() > 0.5)
            .count();
        assert!(hits >= 950, "{hits}");
    }

    #[test]
    fn single_candidate_is_the_good_draw() {
        let space = unit_space();
        let h = history_1d(
            &(0..12)
                .map(|i| (i as f64 / 12.0, i as f64))
                .collect::<Vec<_>>(),
        );
        let cfg = TpeConfig {
            n_candidates: 1,
            ..TpeConfig::default()
        };
        let (good, _) = split_good_bad(&h, cfg.gamma).unwrap();
        let gp: Vec<f64> = good
            .iter()
            .map(|r| r.assignment.get("x").unwrap())
            .collect();
        let l = parzen_density(&gp, &cfg).unwrap();
        for seed in 0..20 {
            let mut r = rng::stream(&[seed, 0x7e5e]);
            let draw = l.sample(&mut r);
            assert_eq!(
                tpe_suggest(&h, &space, &cfg, seed)
                    .unwrap()
                    .get("x")
                    .unwrap(),
                draw
            );
        }
    }

    #[test]
    fn integer_dimensions_land_on_integers() {
        let space =
            SearchSpace::from_dims([("k", ParamDomain::IntUniform { lo: 0, hi: 100 })]).unwrap();
        let h: Vec<TrialRecord> = (0..15)
            .map(|i| {
                TrialRecord::completed(
                    i,
                    [("k".to_string(), (i * 7) as f64)].into_iter().collect(),
                    i as f64,
                    0,
                )
            })
            .collect();
        for s in 0..50 {
            let k = tpe_suggest(&h, &space, &TpeConfig::default(), s)
                .unwrap()
                .get("k")
                .unwrap();
            assert_eq!(k, k.round());
            assert!((0.0..=100.0).contains(&k));
        }
    }

    #[test]
    fn converges_on_a_unimodal_objective() {
        let space = unit_space();
        let cfg = TpeConfig::default();
        let mut medians = Vec::new();
        for seed in 0..10u64 {
            let mut h: Vec<TrialRecord> = Vec::new();
            for t in 0..200 {
                let a = tpe_suggest(&h, &space, &cfg, crate::rng::mix(&[seed, t as u64])).unwrap();
                let x = a.get("x").unwrap();
                h.push(TrialRecord::completed(t, a, -(x - 0.3) * (x - 0.3), 0));
            }
            let mut last: Vec<f64> = h[180..]
                .iter()
                .map(|r| r.assignment.get("x").unwrap())
                .collect();
            last.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push((last[9] + last[10]) / 2.0);
        }
        assert!(medians.iter().all(|m| (m - 0.3).abs() < 0.1), "{medians:?}");
    }

    #[test]
    fn failed_only_history_is_prior_sampling() {
        let space = unit_space();
        let h: Vec<TrialRecord> = (0..20)
            .map(|i| {
                TrialRecord::failed(i, [("x".to_string(), 0.5)].into_iter().collect(), 0, "nan")
            })
            .collect();
        for s in 0..10 {
            assert_eq!(
                tpe_suggest(&h, &space, &TpeConfig::default(), s).unwrap(),
                random_suggest(&space, s)
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn split_partitions_and_orders(objs in prop::collection::vec(-5.0f64..5.0, 1..40), gamma in 0.01f64..0.99) {
            let h = history_1d(&objs.iter().map(|o| (0.5, *o)).collect::<Vec<_>>());
            let (g, b) = split_good_bad(&h, gamma).unwrap();
            prop_assert_eq!(g.len() + b.len(), objs.len());
            prop_assert!(!g.is_empty());
            let gmin = g.iter().map(|r| r.objective.unwrap()).fold(f64::INFINITY, f64::min);
            let bmax = b.iter().map(|r| r.objective.unwrap()).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(gmin >= bmax);
        }

        #[test]
        fn density_is_nonnegative_and_samples_in_range(pts in prop::collection::vec(0.0f64..=1.0, 0..20), seed in any::<u64>(), u in 0.0f64..=1.0) {
            let d = parzen_density(&pts, &TpeConfig::default()).unwrap();
            prop_assert!(d.pdf(u) >= 0.0);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                let s = d.sample(&mut r);
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn affine_rescaling_keeps_suggestions(seed in any::<u64>(), a in 0.01f64..100.0, b in -10.0f64..10.0) {
            let space = crate::searchspace::default_autoft_space(1e-3).unwrap();
            let mut h = Vec::new();
            for t in 0..14 {
                let x = random_suggest(&space, t as u64 + 1000);
                h.push(TrialRecord::completed(t, x, (t as f64 * 0.37).sin(), t as u64));
            }
            let scaled: Vec<TrialRecord> = h.iter().cloned().map(|mut r| { r.objective = r.objective.map(|v| a * v + b); r }).collect();
            let cfg = TpeConfig::default();
            prop_assert_eq!(tpe_suggest(&h, &space, &cfg, seed).unwrap(), tpe_suggest(&scaled, &space, &cfg, seed).unwrap());
        }

        #[test]
        fn suggestions_stay_in_domain(seed in any::<u64>()) {
            let space = crate::searchspace::default_autoft_space(1e-3).unwrap();
            let h: Vec<TrialRecord> = (0..12)
                .map(|t| TrialRecord::completed(t, random_suggest(&space, t as u64), t as f64, 0))
                .collect();
            let a = tpe_suggest(&h, &space, &TpeConfig::default(), seed).unwrap();
            prop_assert!(space.validate(&a).is_ok());
        }
    }
}
