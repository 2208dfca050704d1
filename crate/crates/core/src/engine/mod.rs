//! The bi-level loop: sample hyperparameters, run a short fine-tune with the
//! composite loss, score it on a shifted validation set, feed the score back
//! to the sampler, and finally fine-tune with the best hyperparameters.

pub mod compare;
pub mod didactic;
pub mod study;
pub mod trial;

use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::eval::EvalError;
use crate::losses::{LossError, LossTerm, LossWeights};
use crate::models::ModelError;
use crate::samplers::{GpConfig, SamplerError, SamplerKind, TpeConfig, TrialRecord};
use crate::searchspace::{
    group_param_name, ParamAssignment, SearchSpace, SpaceError, DELTA, ETA, SIGMA,
};

pub use compare::{compare_samplers, CompareRow, CompareSetup, CompareSummary, CompareTable};
pub use didactic::{didactic_run, DidacticArm, DidacticConfig, DidacticResult};
pub use study::{autoft_run, autoft_run_with, Budget, Splits, StudyResult};
pub use trial::{fine_tune, pretrain, trial_eval, TrialOutcome};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid engine setting: {0}")]
    Config(String),
    #[error("all {} trials failed", history.len())]
    AllTrialsFailed { history: Vec<TrialRecord> },
    #[error("trial observer failed: {0}")]
    Observer(String),
}

/// Score of a model on a validation or test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Top1,
    MacroF1,
    WorstGroup,
}

/// Per-group learning rate, weight decay and parameter-term weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupHyper {
    /// Name of the parameter segment the group covers.
    pub group: String,
    pub eta: f64,
    pub delta: f64,
    pub w_l1norm: f64,
    pub w_l2norm: f64,
    pub w_l1init: f64,
    pub w_l2init: f64,
}

/// Decoded hyperparameters `(W, eta, delta, sigma)`.
///
/// For a grouped space `groups` carries the per-segment values and the
/// top-level `eta`, `delta` and four parameter-term weights are unused
/// (they hold the first group's values for display).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub weights: LossWeights,
    pub eta: f64,
    pub delta: f64,
    pub sigma: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupHyper>,
}

const GROUP_TERMS: [LossTerm; 4] = LossTerm::PARAMETER_TERMS;

fn need(a: &ParamAssignment, name: &str) -> Result<f64, EngineError> {
    a.get(name)
        .ok_or_else(|| EngineError::Space(SpaceError::MissingParameter(name.to_string())))
}

impl HyperParams {
    /// Group names of a grouped space, in order; empty for the canonical space.
    pub fn space_groups(space: &SearchSpace) -> Vec<String> {
        if space.contains(ETA) {
            return Vec::new();
        }
        let prefix = format!("{ETA}_");
        space
            .names()
            .filter_map(|n| n.strip_prefix(&prefix).map(str::to_string))
            .collect()
    }

    pub fn decode(a: &ParamAssignment, space: &SearchSpace) -> Result<Self, EngineError> {
        space.validate(a)?;
        let groups = Self::space_groups(space);
        let sigma = need(a, SIGMA)?;
        if sigma < 0.0 || sigma.fract() != 0.0 {
            return Err(EngineError::Config(format!(
                "seed {sigma} is not a nonnegative integer"
            )));
        }
        let mut weights = LossWeights::zeros();
        for t in LossTerm::ALL {
            if !(t.is_parameter_term() && !groups.is_empty()) {
                weights.set(t, need(a, t.weight_name())?);
            }
        }
        if groups.is_empty() {
            weights.validate()?;
            return Ok(Self {
                weights,
                eta: need(a, ETA)?,
                delta: need(a, DELTA)?,
                sigma: sigma as u64,
                groups: Vec::new(),
            });
        }
        let mut out = Vec::with_capacity(groups.len());
        for g in &groups {
            let w = |t: LossTerm| need(a, &group_param_name(t.weight_name(), g));
            out.push(GroupHyper {
                group: g.clone(),
                eta: need(a, &group_param_name(ETA, g))?,
                delta: need(a, &group_param_name(DELTA, g))?,
                w_l1norm: w(LossTerm::L1Norm)?,
                w_l2norm: w(LossTerm::L2Norm)?,
                w_l1init: w(LossTerm::L1Init)?,
                w_l2init: w(LossTerm::L2Init)?,
            });
        }
        let first = &out[0];
        weights.w_l1norm = first.w_l1norm;
        weights.w_l2norm = first.w_l2norm;
        weights.w_l1init = first.w_l1init;
        weights.w_l2init = first.w_l2init;
        weights.validate()?;
        Ok(Self {
            weights,
            eta: first.eta,
            delta: first.delta,
            sigma: sigma as u64,
            groups: out,
        })
    }

    /// Inverse of [`HyperParams::decode`] for the same space.
    pub fn encode(&self, space: &SearchSpace) -> Result<ParamAssignment, EngineError> {
        let groups = Self::space_groups(space);
        let mut a = ParamAssignment::default();
        for (name, _) in space.iter() {
            let v = if let Some(t) = LossTerm::ALL.iter().find(|t| t.weight_name() == name) {
                self.weights.get(*t)
            } else if name == ETA {
                self.eta
            } else if name == DELTA {
                self.delta
            } else if name == SIGMA {
                self.sigma as f64
            } else {
                self.group_value(name, &groups)
                    .ok_or_else(|| SpaceError::UnknownParameter(name.to_string()))?
            };
            a.insert(name, v);
        }
        space.validate(&a)?;
        Ok(a)
    }

    fn group_value(&self, name: &str, groups: &[String]) -> Option<f64> {
        for (g, gh) in groups.iter().zip(&self.groups) {
            if name == group_param_name(ETA, g) {
                return Some(gh.eta);
            }
            if name == group_param_name(DELTA, g) {
                return Some(gh.delta);
            }
            for (t, v) in
                GROUP_TERMS
                    .iter()
                    .zip([gh.w_l1norm, gh.w_l2norm, gh.w_l1init, gh.w_l2init])
            {
                if name == group_param_name(t.weight_name(), g) {
                    return Some(v);
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Steps between ID-validation checks.
    pub eval_every: usize,
    /// Checks without strict improvement before stopping.
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            eval_every: 25,
            patience: 8,
        }
    }
}

/// Settings of one study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Inner fine-tuning steps per trial (K).
    pub inner_steps: usize,
    /// Outer trials (T).
    pub trials: usize,
    /// Rows of the validation set used by the objective.
    pub val_size: usize,
    pub metric: Metric,
    pub sampler: SamplerKind,
    pub tpe: TpeConfig,
    pub gp: GpConfig,
    pub final_steps: usize,
    pub early_stop: EarlyStop,
    pub global_seed: u64,
    /// Mini-batch size; `None` means `min(64, n_train)`.
    pub batch_size: Option<usize>,
    /// Trials evaluated concurrently. Suggestions for a batch are drawn from
    /// the same history, so results depend on this value.
    pub workers: usize,
    pub record_wall_time: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            inner_steps: 10,
            trials: 500,
            val_size: 1000,
            metric: Metric::Top1,
            sampler: SamplerKind::Tpe,
            tpe: TpeConfig::default(),
            gp: GpConfig::default(),
            final_steps: 4 * trial::PRETRAIN_STEPS,
            early_stop: EarlyStop::default(),
            global_seed: 0,
            batch_size: None,
            workers: 1,
            record_wall_time: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.trials == 0 {
            return bad("trials must be positive");
        }
        if self.val_size == 0 {
            return bad("val_size must be positive");
        }
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        if self.final_steps > 0
            && (self.early_stop.eval_every == 0 || self.early_stop.patience == 0)
        {
            return bad("early_stop.eval_every and early_stop.patience must be positive");
        }
        self.tpe.validate()?;
        Ok(())
    }

    pub fn batch_size_for(&self, n_train: usize) -> usize {
        self.batch_size.unwrap_or(64).min(n_train).max(1)
    }
}
