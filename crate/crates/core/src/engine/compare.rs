//! Sampler comparison and validation-set ablation on the spurious-blobs
//! benchmark.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::study::{autoft_run, Splits};
use super::trial::{pretrain, PRETRAIN_STEPS};
use super::{EngineConfig, EngineError};
use crate::data::{fmt_f64, gen_spurious_blobs, BlobsConfig, BlobsFamily};
use crate::eval;
use crate::models::LinearModel;
use crate::rng;
use crate::samplers::SamplerKind;
use crate::searchspace::{autoft_space, AutoFtSpaceOptions, SearchSpace};

/// Benchmark, pretraining and study settings shared by every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSetup {
    pub blobs: BlobsConfig,
    pub engine: EngineConfig,
    /// Pretraining learning rate; also centres the learning-rate prior.
    pub eta_star: f64,
    pub pretrain_steps: usize,
    /// Base seed; repeat `r` derives its data and study seeds from it.
    pub seed: u64,
}

impl Default for CompareSetup {
    fn default() -> Self {
        Self {
            blobs: BlobsConfig::benchmark(0),
            engine: EngineConfig {
                inner_steps: PRETRAIN_STEPS,
                ..EngineConfig::default()
            },
            eta_star: 0.05,
            pretrain_steps: PRETRAIN_STEPS,
            seed: 0,
        }
    }
}

/// Data, initial model and search space of one repeat.
#[derive(Debug, Clone)]
pub struct Instance {
    pub family: BlobsFamily,
    pub theta0: LinearModel,
    pub space: SearchSpace,
    pub global_seed: u64,
}

impl CompareSetup {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Repeat `repeat`: every sampler sees the same data and seeds.
    pub fn instance(&self, repeat: usize) -> Result<Instance, EngineError> {
        let mut blobs = self.blobs.clone();
        blobs.seed = rng::mix(&[self.seed, repeat as u64, 0xda7a]);
        let family = gen_spurious_blobs(&blobs)?;
        let batch = self.engine.batch_size_for(family.pretrain.len());
        let theta0 = pretrain(
            &family.pretrain,
            self.eta_star,
            self.pretrain_steps,
            batch,
            blobs.seed,
        )?;
        Ok(Instance {
            family,
            theta0,
            space: autoft_space(&AutoFtSpaceOptions::new(self.eta_star))?,
            global_seed: rng::mix(&[self.seed, repeat as u64, 0x5eed]),
        })
    }
}

/// Accuracy-type scores of a fine-tuned model: ID on the ID test split, OOD
/// as the mean over the test shifts.
pub fn id_ood_scores(
    setup: &CompareSetup,
    model: &LinearModel,
    family: &BlobsFamily,
) -> Result<(f64, f64), EngineError> {
    let metric = setup.engine.metric;
    let id = eval::score(metric, model, &family.id_test)?;
    let mut ood = 0.0;
    for t in &family.tests {
        ood += eval::score(metric, model, t)?;
    }
    Ok((id, ood / family.tests.len().max(1) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub sampler: SamplerKind,
    pub repeat: usize,
    pub id: f64,
    pub ood: f64,
    /// Best outer objective reached by the study.
    pub objective: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub sampler: SamplerKind,
    pub repeats: usize,
    pub id_median: f64,
    pub id_iqr: f64,
    pub ood_median: f64,
    pub ood_iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

fn iqr(values: &[f64]) -> f64 {
    quantile(values, 0.75) - quantile(values, 0.25)
}

impl CompareTable {
    /// One summary per sampler, in first-appearance order.
    pub fn summary(&self) -> Vec<CompareSummary> {
        let mut kinds: Vec<SamplerKind> = Vec::new();
        for r in &self.rows {
            if !kinds.contains(&r.sampler) {
                kinds.push(r.sampler);
            }
        }
        kinds
            .into_iter()
            .map(|k| {
                let id: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.sampler == k)
                    .map(|r| r.id)
                    .collect();
                let ood: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.sampler == k)
                    .map(|r| r.ood)
                    .collect();
                CompareSummary {
                    sampler: k,
                    repeats: id.len(),
                    id_median: median(&id),
                    id_iqr: iqr(&id),
                    ood_median: median(&ood),
                    ood_iqr: iqr(&ood),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sampler,repeat,id,ood\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.sampler,
                r.repeat,
                fmt_f64(r.id),
                fmt_f64(r.ood)
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("sampler,repeats,id_median,id_iqr,ood_median,ood_iqr\n");
        for s in self.summary() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.sampler,
                s.repeats,
                fmt_f64(s.id_median),
                fmt_f64(s.id_iqr),
                fmt_f64(s.ood_median),
                fmt_f64(s.ood_iqr)
            ));
        }
        out
    }
}

/// Applies `f` to `0..n` on all available cores; results keep index order.
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = std::thread::available_parallelism()
        .map_or(1, |p| p.get())
        .min(n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("result slots")[i] = Some(v);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|v| v.expect("every job ran"))
        .collect()
}

/// Runs one study per `(sampler, repeat)` with `budget` trials each. All
/// samplers share the data, initial model and global seed of a repeat;
/// repeats use disjoint seeds.
pub fn compare_samplers(
    setup: &CompareSetup,
    samplers: &[SamplerKind],
    budget: usize,
    repeats: usize,
) -> Result<CompareTable, EngineError> {
    let instances: Vec<Instance> = par_map(repeats, |r| setup.instance(r))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, SamplerKind)> = (0..repeats)
        .flat_map(|r| samplers.iter().map(move |s| (r, *s)))
        .collect();
    let rows = par_map(jobs.len(), |j| {
        let (r, sampler) = jobs[j];
        let inst = &instances[r];
        let cfg = EngineConfig {
            trials: budget,
            sampler,
            global_seed: inst.global_seed,
            ..setup.engine.clone()
        };
        let splits = Splits {
            train: &inst.family.train,
            val: &inst.family.ood_val,
            id_val: Some(&inst.family.id_val),
        };
        let study = autoft_run(&inst.theta0, splits, &inst.space, &cfg)?;
        let (id, ood) = id_ood_scores(setup, &study.final_model, &inst.family)?;
        Ok(CompareRow {
            sampler,
            repeat: r,
            id,
            ood,
            objective: study.best_objective,
            trials: study.history.len(),
        })
    });
    let mut rows: Vec<CompareRow> = rows.into_iter().collect::<Result<_, EngineError>>()?;
    rows.sort_by_key(|r| (samplers.iter().position(|s| *s == r.sampler), r.repeat));
    Ok(CompareTable { rows })
}

/// OOD-test scores of studies whose objective is the OOD validation split
/// versus the ID validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct ValChoice {
    pub ood_val: Vec<f64>,
    pub id_val: Vec<f64>,
}

/// Runs the same study twice per repeat, once scoring trials on the OOD
/// validation split and once on the ID validation split. Both use the
/// same number of validation rows and early-stop on ID validation.
pub fn val_choice_ablation(
    setup: &CompareSetup,
    budget: usize,
    repeats: usize,
) -> Result<ValChoice, EngineError> {
    let runs = par_map(2 * repeats, |j| {
        let (r, use_ood) = (j / 2, j % 2 == 0);
        let inst = setup.instance(r)?;
        let f = &inst.family;
        let rows = setup
            .engine
            .val_size
            .min(f.ood_val.len())
            .min(f.id_val.len());
        let cfg = EngineConfig {
            trials: budget,
            val_size: rows,
            global_seed: inst.global_seed,
            ..setup.engine.clone()
        };
        let splits = Splits {
            train: &f.train,
            val: if use_ood { &f.ood_val } else { &f.id_val },
            id_val: Some(&f.id_val),
        };
        let study = autoft_run(&inst.theta0, splits, &inst.space, &cfg)?;
        Ok(id_ood_scores(setup, &study.final_model, f)?.1)
    });
    let runs: Vec<f64> = runs.into_iter().collect::<Result<_, EngineError>>()?;
    Ok(ValChoice {
        ood_val: runs.iter().step_by(2).copied().collect(),
        id_val: runs.iter().skip(1).step_by(2).copied().collect(),
    })
}
