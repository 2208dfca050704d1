//! The outer loop and the final fine-tune with the selected hyperparameters.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::trial::{final_fine_tune, trial_eval, trial_seed, TrialOutcome};
use super::{EngineConfig, EngineError, HyperParams};
use crate::data::LabeledDataset;
use crate::models::LinearModel;
use crate::rng;
use crate::samplers::{qmc_suggest, Sampler, SamplerKind, SamplerState, TrialRecord};
use crate::searchspace::{ParamAssignment, SearchSpace};

/// Datasets of one study.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    /// Fine-tuning data.
    pub train: &'a LabeledDataset,
    /// Objective of the outer loop; its first `val_size` rows are used.
    pub val: &'a LabeledDataset,
    /// Early-stopping set of the final run.
    pub id_val: Option<&'a LabeledDataset>,
}

/// Inner-step accounting of a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Updates applied across all trials.
    pub trial_steps: usize,
    /// Updates applied by the final run.
    pub final_steps: usize,
    pub total: usize,
    /// `trial_steps / final_steps`; infinite when the final run is empty.
    pub overhead: f64,
}

impl Budget {
    pub fn new(trial_steps: usize, final_steps: usize) -> Self {
        Self {
            trial_steps,
            final_steps,
            total: trial_steps + final_steps,
            overhead: if final_steps == 0 {
                f64::INFINITY
            } else {
                trial_steps as f64 / final_steps as f64
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub history: Vec<TrialRecord>,
    pub best: HyperParams,
    pub best_trial: usize,
    pub best_objective: f64,
    pub final_model: LinearModel,
    pub budget: Budget,
}

/// Seed handed to the sampler for trial `trial_id`.
pub fn suggestion_seed(global_seed: u64, trial_id: usize) -> u64 {
    rng::mix(&[global_seed, trial_id as u64, 0x5e6])
}

pub fn sampler_for(config: &EngineConfig) -> Sampler {
    match config.sampler {
        SamplerKind::Random => Sampler::Random,
        SamplerKind::Qmc => Sampler::Qmc {
            scramble_seed: Some(rng::mix(&[config.global_seed, 0x9c])),
        },
        SamplerKind::GpEi => Sampler::GpEi(config.gp.clone()),
        SamplerKind::Tpe => Sampler::Tpe(config.tpe.clone()),
    }
}

/// Runs a study from scratch; see [`autoft_run_with`].
pub fn autoft_run(
    theta0: &LinearModel,
    splits: Splits<'_>,
    space: &SearchSpace,
    config: &EngineConfig,
) -> Result<StudyResult, EngineError> {
    autoft_run_with(theta0, splits, space, config, Vec::new(), |_| Ok(()))
}

/// Runs the outer loop until `config.trials` records exist, then fine-tunes
/// from `theta0` with the best hyperparameters.
///
/// `resume` holds records of an interrupted study with the same settings;
/// because every suggestion depends only on the history and fixed seeds,
/// the resumed study matches an uninterrupted one. `on_trial` sees every
/// new record in trial order, right after it is observed.
///
/// With `workers > 1`, each batch of `workers` trials is suggested from the
/// same history and evaluated concurrently.
pub fn autoft_run_with<F>(
    theta0: &LinearModel,
    splits: Splits<'_>,
    space: &SearchSpace,
    config: &EngineConfig,
    resume: Vec<TrialRecord>,
    mut on_trial: F,
) -> Result<StudyResult, EngineError>
where
    F: FnMut(&TrialRecord) -> Result<(), String>,
{
    config.validate()?;
    if config.val_size > splits.val.len() {
        return Err(EngineError::Config(format!(
            "val_size {} exceeds the {} validation rows",
            config.val_size,
            splits.val.len()
        )));
    }
    if resume.len() > config.trials {
        return Err(EngineError::Config(format!(
            "{} recorded trials exceed the budget of {}",
            resume.len(),
            config.trials
        )));
    }
    let val = splits.val.head(config.val_size);
    let sampler = sampler_for(config);
    let mut trial_steps = resume.len() * config.inner_steps;
    let mut state = SamplerState::from_history(resume)?;

    while state.len() < config.trials {
        let start = state.len();
        let width = config.workers.min(config.trials - start);
        let mut proposals = Vec::with_capacity(width);
        for id in start..start + width {
            let seed = suggestion_seed(config.global_seed, id);
            let a = match &sampler {
                // the counter must advance across batch members
                Sampler::Qmc { scramble_seed } => qmc_suggest(id as u64, space, *scramble_seed),
                other => other.suggest(state.history(), space, seed)?,
            };
            proposals.push(a);
        }
        let records = evaluate_batch(theta0, splits.train, &val, space, config, start, proposals)?;
        for (record, steps) in records {
            trial_steps += steps;
            state.observe(record.clone())?;
            on_trial(&record).map_err(EngineError::Observer)?;
        }
    }

    let history = state.history().to_vec();
    let Some(best) = state.best() else {
        return Err(EngineError::AllTrialsFailed { history });
    };
    let best_trial = best.trial_id;
    let best_objective = best.score().expect("best trial completed");
    let phi = HyperParams::decode(&best.assignment, space)?;
    let (final_model, final_steps) = final_fine_tune(
        theta0,
        &phi,
        splits.train,
        splits.id_val,
        config.final_steps,
        config.early_stop,
        config.batch_size_for(splits.train.len()),
        trial_seed(config.global_seed, usize::MAX, phi.sigma),
    )?;
    Ok(StudyResult {
        history,
        best: phi,
        best_trial,
        best_objective,
        final_model,
        budget: Budget::new(trial_steps, final_steps),
    })
}

fn run_one(
    theta0: &LinearModel,
    train: &LabeledDataset,
    val: &LabeledDataset,
    space: &SearchSpace,
    config: &EngineConfig,
    id: usize,
    a: ParamAssignment,
) -> Result<(TrialRecord, usize), EngineError> {
    let started = Instant::now();
    let phi = HyperParams::decode(&a, space)?;
    let seed = trial_seed(config.global_seed, id, phi.sigma);
    let outcome = trial_eval(theta0, &phi, train, val, config, id)?;
    let steps = outcome.steps();
    let mut record = match outcome {
        TrialOutcome::Completed { objective, .. } => TrialRecord::completed(id, a, objective, seed),
        TrialOutcome::Failed { message, .. } => TrialRecord::failed(id, a, seed, message),
    };
    if config.record_wall_time {
        record.elapsed = Some(started.elapsed().as_secs_f64());
    }
    Ok((record, steps))
}

fn evaluate_batch(
    theta0: &LinearModel,
    train: &LabeledDataset,
    val: &LabeledDataset,
    space: &SearchSpace,
    config: &EngineConfig,
    start: usize,
    proposals: Vec<ParamAssignment>,
) -> Result<Vec<(TrialRecord, usize)>, EngineError> {
    if proposals.len() == 1 {
        let a = proposals.into_iter().next().expect("one proposal");
        return Ok(vec![run_one(theta0, train, val, space, config, start, a)?]);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = proposals
            .into_iter()
            .enumerate()
            .map(|(j, a)| s.spawn(move || run_one(theta0, train, val, space, config, start + j, a)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial worker panicked"))
            .collect()
    })
}
