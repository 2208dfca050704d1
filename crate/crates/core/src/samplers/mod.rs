//! Outer-loop samplers behind one contract: a sampler is a pure function of
//! the trial history, the search space and a seed.

pub mod gp;
pub mod qmc;
pub mod random;
pub mod tpe;

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::searchspace::{ParamAssignment, SearchSpace, SpaceError};

pub use gp::{gp_ei_suggest, GpConfig};
pub use qmc::{qmc_suggest, sobol_point};
pub use random::random_suggest;
pub use tpe::{parzen_density, split_good_bad, tpe_suggest, ParzenDensity, TpeConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplerError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("trial {0} was already observed")]
    DuplicateTrial(usize),
    #[error("trial ids must be dense: expected {expected}, got {got}")]
    NonDenseTrial { expected: usize, got: usize },
    #[error("history has no completed trials")]
    EmptyHistory,
    #[error("invalid sampler setting: {0}")]
    InvalidConfig(String),
    #[error("density has no points and zero prior weight")]
    EmptyDensity,
    #[error("kernel matrix is not positive definite after jitter {0:e}")]
    NotPositiveDefinite(f64),
    #[error("history record {trial_id} does not match the search space: {source}")]
    HistoryMismatch {
        trial_id: usize,
        #[source]
        source: SpaceError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Failed,
}

/// One outer-loop evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub assignment: ParamAssignment,
    /// Higher is better; absent for failed trials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    pub status: TrialStatus,
    pub seed: u64,
    /// Wall time in seconds, recorded only on request so logs stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn completed(
        trial_id: usize,
        assignment: ParamAssignment,
        objective: f64,
        seed: u64,
    ) -> Self {
        Self {
            trial_id,
            assignment,
            objective: Some(objective),
            status: TrialStatus::Completed,
            seed,
            elapsed: None,
            error: None,
        }
    }

    pub fn failed(
        trial_id: usize,
        assignment: ParamAssignment,
        seed: u64,
        error: impl Into<String>,
    ) -> Self {
        Self {
            trial_id,
            assignment,
            objective: None,
            status: TrialStatus::Failed,
            seed,
            elapsed: None,
            error: Some(error.into()),
        }
    }

    /// The objective of a completed trial with a finite score.
    pub fn score(&self) -> Option<f64> {
        match (self.status, self.objective) {
            (TrialStatus::Completed, Some(v)) if v.is_finite() => Some(v),
            _ => None,
        }
    }
}

/// Completed trials with finite objectives, in history order.
pub fn completed(history: &[TrialRecord]) -> Vec<&TrialRecord> {
    history.iter().filter(|r| r.score().is_some()).collect()
}

/// Best completed trial; ties go to the earlier trial.
pub fn best_of(history: &[TrialRecord]) -> Option<&TrialRecord> {
    let mut best: Option<&TrialRecord> = None;
    for r in history {
        if let Some(v) = r.score() {
            match best {
                Some(b) if b.score().expect("completed") >= v => {}
                _ => best = Some(r),
            }
        }
    }
    best
}

/// Trial history with dense ids, appended by `observe`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplerState {
    history: Vec<TrialRecord>,
    best: Option<usize>,
}

impl SamplerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_history(history: Vec<TrialRecord>) -> Result<Self, SamplerError> {
        let mut state = Self::new();
        for r in history {
            state.observe(r)?;
        }
        Ok(state)
    }

    pub fn observe(&mut self, record: TrialRecord) -> Result<(), SamplerError> {
        if record.trial_id < self.history.len() {
            return Err(SamplerError::DuplicateTrial(record.trial_id));
        }
        if record.trial_id != self.history.len() {
            return Err(SamplerError::NonDenseTrial {
                expected: self.history.len(),
                got: record.trial_id,
            });
        }
        if let Some(v) = record.score() {
            let better = match self.best {
                Some(b) => v > self.history[b].score().expect("best is completed"),
                None => true,
            };
            if better {
                self.best = Some(record.trial_id);
            }
        }
        self.history.push(record);
        Ok(())
    }

    pub fn best(&self) -> Option<&TrialRecord> {
        self.best.map(|b| &self.history[b])
    }

    pub fn history(&self) -> &[TrialRecord] {
        &self.history
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Random,
    Qmc,
    GpEi,
    Tpe,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [
        SamplerKind::Random,
        SamplerKind::Qmc,
        SamplerKind::GpEi,
        SamplerKind::Tpe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Random => "random",
            SamplerKind::Qmc => "qmc",
            SamplerKind::GpEi => "gp_ei",
            SamplerKind::Tpe => "tpe",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SamplerError::InvalidConfig(format!("unknown sampler `{s}`")))
    }
}

/// A configured sampler.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampler {
    Random,
    /// Scrambled Sobol points; the `i`-th suggestion is point `i`.
    Qmc {
        scramble_seed: Option<u64>,
    },
    GpEi(GpConfig),
    Tpe(TpeConfig),
}

impl Sampler {
    pub fn kind(&self) -> SamplerKind {
        match self {
            Sampler::Random => SamplerKind::Random,
            Sampler::Qmc { .. } => SamplerKind::Qmc,
            Sampler::GpEi(_) => SamplerKind::GpEi,
            Sampler::Tpe(_) => SamplerKind::Tpe,
        }
    }

    /// Next assignment given the history; deterministic in `(history, seed)`.
    pub fn suggest(
        &self,
        history: &[TrialRecord],
        space: &SearchSpace,
        seed: u64,
    ) -> Result<ParamAssignment, SamplerError> {
        check_history(history, space)?;
        match self {
            Sampler::Random => Ok(random_suggest(space, seed)),
            Sampler::Qmc { scramble_seed } => {
                Ok(qmc_suggest(history.len() as u64, space, *scramble_seed))
            }
            Sampler::GpEi(cfg) => gp_ei_suggest(history, space, cfg, seed),
            Sampler::Tpe(cfg) => tpe_suggest(history, space, cfg, seed),
        }
    }
}

fn check_history(history: &[TrialRecord], space: &SearchSpace) -> Result<(), SamplerError> {
    for r in history {
        space
            .validate(&r.assignment)
            .map_err(|source| SamplerError::HistoryMismatch {
                trial_id: r.trial_id,
                source,
            })?;
    }
    Ok(())
}

/// Unit coordinates of the completed trials, with their scores.
pub(crate) fn completed_units(
    history: &[TrialRecord],
    space: &SearchSpace,
) -> Result<Vec<(Vec<f64>, f64, usize)>, SamplerError> {
    completed(history)
        .into_iter()
        .map(|r| {
            Ok((
                space.to_unit(&r.assignment)?,
                r.score().expect("completed"),
                r.trial_id,
            ))
        })
        .collect()
}

/// Writes one record per line.
pub fn write_history<W: Write>(w: &mut W, history: &[TrialRecord]) -> std::io::Result<()> {
    for r in history {
        write_record(w, r)?;
    }
    Ok(())
}

pub fn write_record<W: Write>(w: &mut W, r: &TrialRecord) -> std::io::Result<()> {
    let line = serde_json::to_string(r).map_err(std::io::Error::other)?;
    writeln!(w, "{line}")
}

/// Result of reading a history that may end in a damaged line.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRead {
    pub records: Vec<TrialRecord>,
    /// 1-based line number and parse error of the first unreadable line.
    pub damaged: Option<(usize, String)>,
}

/// Reads records until end of input or the first unparsable line.
pub fn read_history<R: BufRead>(r: R) -> std::io::Result<HistoryRead> {
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrialRecord>(&line) {
            Ok(rec) => records.push(rec),
            Err(e) => {
                return Ok(HistoryRead {
                    records,
                    damaged: Some((i + 1, e.to_string())),
                })
            }
        }
    }
    Ok(HistoryRead {
        records,
        damaged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::default_autoft_space;

    fn record(id: usize, objective: Option<f64>) -> TrialRecord {
        let space = default_autoft_space(1e-3).unwrap();
        let a = random_suggest(&space, id as u64);
        match objective {
            Some(v) => TrialRecord::completed(id, a, v, id as u64),
            None => TrialRecord::failed(id, a, id as u64, "diverged"),
        }
    }

    #[test]
    fn observe_tracks_best() {
        let mut s = SamplerState::new();
        s.observe(record(0, Some(0.3))).unwrap();
        assert_eq!(s.best().unwrap().trial_id, 0);
        s.observe(record(1, None)).unwrap();
        assert_eq!(s.best().unwrap().trial_id, 0);
        s.observe(record(2, Some(0.7))).unwrap();
        assert_eq!(s.best().unwrap().objective, Some(0.7));
        s.observe(record(3, Some(0.7))).unwrap();
        assert_eq!(s.best().unwrap().trial_id, 2);
        assert_eq!(
            s.observe(record(1, Some(1.0))),
            Err(SamplerError::DuplicateTrial(1))
        );
        assert!(matches!(
            s.observe(record(9, Some(1.0))),
            Err(SamplerError::NonDenseTrial { .. })
        ));
        assert_eq!(best_of(s.history()).unwrap().trial_id, 2);
    }

    #[test]
    fn history_round_trips_through_json_lines() {
        let h = vec![
            record(0, Some(0.125)),
            record(1, None),
            record(2, Some(0.1 + 0.2)),
        ];
        let mut buf = Vec::new();
        write_history(&mut buf, &h).unwrap();
        let back = read_history(buf.as_slice()).unwrap();
        assert_eq!(back.records, h);
        assert!(back.damaged.is_none());
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains("elapsed"));
        let cut = &text[..text.len() - 10];
        let back = read_history(cut.as_bytes()).unwrap();
        assert_eq!(back.records, h[..2]);
        assert_eq!(back.damaged.unwrap().0, 3);
    }

    #[test]
    fn sampler_names_parse() {
        for k in SamplerKind::ALL {
            assert_eq!(k.name().parse::<SamplerKind>().unwrap(), k);
        }
        assert!("bayes".parse::<SamplerKind>().is_err());
    }

    #[test]
    fn mismatched_history_is_rejected() {
        let space = default_autoft_space(1e-3).unwrap();
        let other = default_autoft_space(1.0).unwrap();
        let mut h = vec![record(0, Some(0.5))];
        h[0].assignment = random_suggest(&other, 1);
        h[0].assignment.insert("eta", 50.0);
        assert!(matches!(
            Sampler::Random.suggest(&h, &space, 0),
            Err(SamplerError::HistoryMismatch { trial_id: 0, .. })
        ));
    }
}
