//! Command-line front end. Exit codes: 0 success, 2 configuration or usage
//! error, 3 study failure. Human-readable output goes to stderr; JSON and
//! CSV go to files or stdout.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, gen_spurious_blobs, load_dataset, BlobsConfig, LabeledDataset};
use crate::engine::compare::{median, val_choice_ablation};
use crate::engine::study::autoft_run_with;
use crate::engine::trial::{pretrain, PRETRAIN_STEPS};
use crate::engine::{
    compare_samplers, didactic_run, Budget, CompareSetup, DidacticConfig, EngineConfig,
    EngineError, HyperParams, Splits,
};
use crate::eval::{self, effective_robustness_rows, ensemble_sweep};
use crate::losses::LossTerm;
use crate::models::{LinearModel, VbSettings};
use crate::rng;
use crate::samplers::{best_of, read_history, write_record, SamplerKind, TrialRecord};
use crate::searchspace::{
    autoft_space, grouped_space, AutoFtSpaceOptions, ParamAssignment, ParamDomain, SearchSpace,
};

/// Environment variable that overrides `engine.global_seed`.
pub const SEED_ENV: &str = "AUTOFT_SEED";
pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.json";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const BEST_FILE: &str = "best.json";
pub const MODEL_FILE: &str = "final_model.json";
pub const BUDGET_FILE: &str = "budget.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Study(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Study(_) => 3,
        }
    }
}

fn config_err(m: impl std::fmt::Display) -> CliError {
    CliError::Config(m.to_string())
}

fn study_err(m: impl std::fmt::Display) -> CliError {
    CliError::Study(m.to_string())
}

/// Settings errors are the caller's fault; everything else is a failed study.
fn engine_err(e: EngineError) -> CliError {
    match e {
        EngineError::Config(_) | EngineError::Space(_) | EngineError::Data(_) => {
            CliError::Config(e.to_string())
        }
        other => CliError::Study(other.to_string()),
    }
}

/// Search space of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceConfig {
    /// The canonical twelve dimensions, optionally split per parameter group.
    Default {
        eta_star: f64,
        #[serde(default)]
        decay: Option<ParamDomain>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        groups: Vec<String>,
    },
    /// Explicit dimensions; names must follow the canonical naming.
    Custom { dims: Vec<DimSpec> },
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig::Default {
            eta_star: 0.05,
            decay: None,
            groups: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimSpec {
    pub name: String,
    pub domain: ParamDomain,
}

impl SpaceConfig {
    pub fn build(&self) -> Result<SearchSpace, CliError> {
        match self {
            SpaceConfig::Default {
                eta_star,
                decay,
                groups,
            } => {
                let mut opts = AutoFtSpaceOptions::new(*eta_star);
                if let Some(d) = decay {
                    opts.decay = *d;
                }
                let base = autoft_space(&opts).map_err(config_err)?;
                if groups.is_empty() {
                    return Ok(base);
                }
                let names: Vec<&str> = groups.iter().map(String::as_str).collect();
                grouped_space(&base, &names).map_err(config_err)
            }
            SpaceConfig::Custom { dims } => {
                SearchSpace::from_dims(dims.iter().map(|d| (d.name.clone(), d.domain)))
                    .map_err(config_err)
            }
        }
    }

    fn eta_star(&self) -> Option<f64> {
        match self {
            SpaceConfig::Default { eta_star, .. } => Some(*eta_star),
            SpaceConfig::Custom { .. } => None,
        }
    }
}

/// Dataset files in the JSON Lines format of [`crate::data::save_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    /// Source data to pretrain the initial model on.
    #[serde(default)]
    pub pretrain: Option<PathBuf>,
    /// A saved model used as the initial model instead of pretraining.
    #[serde(default)]
    pub init_model: Option<PathBuf>,
    pub train: PathBuf,
    /// Objective of the outer loop.
    pub val: PathBuf,
    #[serde(default)]
    pub id_val: Option<PathBuf>,
    #[serde(default)]
    pub id_test: Option<PathBuf>,
    #[serde(default)]
    pub tests: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs(BlobsConfig),
    Files(DataFiles),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Blobs(BlobsConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Learning rate; defaults to the space's reference rate.
    pub eta: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: PRETRAIN_STEPS,
            eta: None,
        }
    }
}

fn default_grid() -> usize {
    10
}

/// The document read by `autoft run`. Relative paths resolve against the
/// directory holding the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub space: SpaceConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Points of the weight-ensembling curve printed by `autoft report`.
    #[serde(default = "default_grid")]
    pub ensemble_grid: usize,
    pub out: PathBuf,
}

impl RunConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        if let DataConfig::Files(f) = &mut self.data {
            for p in [
                &mut f.pretrain,
                &mut f.init_model,
                &mut f.id_val,
                &mut f.id_test,
            ]
            .into_iter()
            .flatten()
            {
                fix(p);
            }
            fix(&mut f.train);
            fix(&mut f.val);
            f.tests.iter_mut().for_each(fix);
        }
    }
}

/// Contents of `config.json`: the run settings after path resolution and the
/// seed override, plus the expanded space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub space: Vec<DimSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BestRecord {
    pub trial_id: usize,
    pub objective: f64,
    pub hyperparams: HyperParams,
    pub assignment: ParamAssignment,
}

/// Byte offset of a 1-based line and column in `text`.
pub fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| {
        config_err(format!(
            "{}: invalid JSON at byte offset {} (line {}, column {}): {e}",
            path.display(),
            byte_offset(text, e.line(), e.column()),
            e.line(),
            e.column()
        ))
    })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))
}

/// Parses a run document and applies path resolution and the seed override.
pub fn load_run_config(path: &Path, seed_override: Option<&str>) -> Result<RunConfig, CliError> {
    let text = read_text(path)?;
    let mut cfg: RunConfig = parse_json(&text, path)?;
    if let Some(s) = seed_override {
        cfg.engine.global_seed = s
            .trim()
            .parse()
            .map_err(|_| config_err(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
    }
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    cfg.engine.validate().map_err(engine_err)?;
    if cfg.ensemble_grid < 2 {
        return Err(config_err("ensemble_grid must be at least 2"));
    }
    Ok(cfg)
}

/// Held while a command writes into a directory.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(config_err(format!(
                "{} is locked by another process (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(config_err(format!("cannot create {}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Evaluation splits of a run, without the initial model.
struct RunData {
    train: LabeledDataset,
    val: LabeledDataset,
    id_val: Option<LabeledDataset>,
    id_test: Option<LabeledDataset>,
    tests: Vec<LabeledDataset>,
    /// Source split, present when the initial model is pretrained.
    pretrain: Option<LabeledDataset>,
    pretrain_seed: u64,
}

fn load(path: &Path) -> Result<LabeledDataset, CliError> {
    load_dataset(path).map_err(config_err)
}

fn run_data(cfg: &RunConfig) -> Result<RunData, CliError> {
    match &cfg.data {
        DataConfig::Blobs(b) => {
            let f = gen_spurious_blobs(b).map_err(config_err)?;
            Ok(RunData {
                train: f.train,
                val: f.ood_val,
                id_val: Some(f.id_val),
                id_test: Some(f.id_test),
                tests: f.tests,
                pretrain: Some(f.pretrain),
                pretrain_seed: b.seed,
            })
        }
        DataConfig::Files(f) => {
            if f.pretrain.is_some() == f.init_model.is_some() {
                return Err(config_err(
                    "data.files needs exactly one of `pretrain` and `init_model`",
                ));
            }
            let opt = |p: &Option<PathBuf>| p.as_deref().map(load).transpose();
            Ok(RunData {
                train: load(&f.train)?,
                val: load(&f.val)?,
                id_val: opt(&f.id_val)?,
                id_test: opt(&f.id_test)?,
                tests: f.tests.iter().map(|p| load(p)).collect::<Result<_, _>>()?,
                pretrain: opt(&f.pretrain)?,
                pretrain_seed: rng::mix(&[cfg.engine.global_seed, 0x9e7]),
            })
        }
    }
}

fn initial_model(cfg: &RunConfig, data: &RunData) -> Result<LinearModel, CliError> {
    if let DataConfig::Files(DataFiles {
        init_model: Some(p),
        ..
    }) = &cfg.data
    {
        let m: LinearModel = parse_json(&read_text(p)?, p)?;
        return Ok(m.frozen());
    }
    let source = data
        .pretrain
        .as_ref()
        .expect("pretrain split present without an initial model");
    let eta = cfg
        .pretrain
        .eta
        .or(cfg.space.eta_star())
        .ok_or_else(|| config_err("pretrain.eta is required with a custom space"))?;
    let batch = cfg.engine.batch_size_for(source.len());
    pretrain(source, eta, cfg.pretrain.steps, batch, data.pretrain_seed).map_err(engine_err)
}

fn check_shapes(
    model: &LinearModel,
    data: &RunData,
    space: &SearchSpace,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let all = [
        Some(&data.train),
        Some(&data.val),
        data.id_val.as_ref(),
        data.id_test.as_ref(),
    ]
    .into_iter()
    .flatten()
    .chain(&data.tests);
    for ds in all {
        if ds.dim() != model.feature_dim() || ds.num_classes() > model.num_classes() {
            return Err(config_err(format!(
                "split `{}` has {} features and {} classes; the model expects {} and {}",
                ds.name,
                ds.dim(),
                ds.num_classes(),
                model.feature_dim(),
                model.num_classes()
            )));
        }
    }
    if cfg.engine.val_size > data.val.len() {
        return Err(config_err(format!(
            "engine.val_size {} exceeds the {} validation rows",
            cfg.engine.val_size,
            data.val.len()
        )));
    }
    for g in HyperParams::space_groups(space) {
        if model.params.segment_range(&g).is_none() {
            return Err(config_err(format!(
                "space group `{g}` is not a parameter segment of the model"
            )));
        }
    }
    let probe = space.sample_prior(&mut rng::stream(&[0]));
    HyperParams::decode(&probe, space)
        .map_err(|e| config_err(format!("space cannot be decoded: {e}")))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(study_err)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| study_err(format!("cannot write {}: {e}", path.display())))
}

fn read_trials(path: &Path) -> Result<Vec<TrialRecord>, CliError> {
    let file =
        File::open(path).map_err(|e| config_err(format!("cannot open {}: {e}", path.display())))?;
    let read = read_history(BufReader::new(file))
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    if let Some((line, err)) = &read.damaged {
        eprintln!(
            "warning: {} line {line} is unreadable ({err}); using the {} records before it",
            path.display(),
            read.records.len()
        );
    }
    Ok(read.records)
}

fn final_scores(
    model: &LinearModel,
    data: &RunData,
    cfg: &RunConfig,
) -> Result<(Option<f64>, IndexMap<String, f64>), CliError> {
    let metric = cfg.engine.metric;
    let id = data
        .id_test
        .as_ref()
        .map(|d| eval::score(metric, model, d))
        .transpose()
        .map_err(study_err)?;
    let mut ood = IndexMap::new();
    for t in &data.tests {
        ood.insert(
            t.name.clone(),
            eval::score(metric, model, t).map_err(study_err)?,
        );
    }
    Ok((id, ood))
}

#[derive(Serialize)]
struct RunSummary<'a> {
    best: &'a HyperParams,
    best_trial: usize,
    objective: f64,
    id: Option<f64>,
    ood: IndexMap<String, f64>,
    budget: Budget,
}

/// `autoft run`: executes a study and writes its run directory.
pub fn cmd_run(config: &Path, resume: bool) -> Result<(), CliError> {
    let seed_env = std::env::var(SEED_ENV).ok();
    let cfg = load_run_config(config, seed_env.as_deref())?;
    let space = cfg.space.build()?;
    let data = run_data(&cfg)?;
    let out = cfg.out.clone();
    let _lock = DirLock::acquire(&out)?;

    let resolved = ResolvedRun {
        config: cfg.clone(),
        space: space
            .iter()
            .map(|(n, d)| DimSpec {
                name: n.to_string(),
                domain: *d,
            })
            .collect(),
    };
    let trials_path = out.join(TRIALS_FILE);
    let history = if resume {
        let prev_path = out.join(CONFIG_FILE);
        let prev: ResolvedRun = parse_json(&read_text(&prev_path)?, &prev_path)?;
        if prev != resolved {
            return Err(config_err(format!(
                "{} was written with different settings",
                prev_path.display()
            )));
        }
        let records = read_trials(&trials_path)?;
        let mut f = File::create(&trials_path)
            .map_err(|e| study_err(format!("cannot rewrite {}: {e}", trials_path.display())))?;
        for r in &records {
            write_record(&mut f, r).map_err(study_err)?;
        }
        eprintln!("resuming after {} recorded trials", records.len());
        records
    } else {
        for stale in [BEST_FILE, MODEL_FILE, BUDGET_FILE] {
            let _ = fs::remove_file(out.join(stale));
        }
        Vec::new()
    };

    let theta0 = initial_model(&cfg, &data)?;
    check_shapes(&theta0, &data, &space, &cfg)?;
    if !resume {
        write_json(&out.join(CONFIG_FILE), &resolved).map_err(|e| config_err(e.to_string()))?;
        File::create(&trials_path)
            .map_err(|e| config_err(format!("cannot create {}: {e}", trials_path.display())))?;
    }

    let mut log = OpenOptions::new()
        .append(true)
        .open(&trials_path)
        .map_err(|e| study_err(format!("cannot open {}: {e}", trials_path.display())))?;
    let splits = Splits {
        train: &data.train,
        val: &data.val,
        id_val: data.id_val.as_ref(),
    };
    let total = cfg.engine.trials;
    let result = autoft_run_with(&theta0, splits, &space, &cfg.engine, history, |r| {
        write_record(&mut log, r)
            .and_then(|_| log.flush())
            .map_err(|e| e.to_string())?;
        match r.objective {
            Some(v) => eprintln!("trial {}/{total}: {}", r.trial_id + 1, fmt_f64(v)),
            None => eprintln!(
                "trial {}/{total}: failed ({})",
                r.trial_id + 1,
                r.error.as_deref().unwrap_or("unknown")
            ),
        }
        Ok(())
    })
    .map_err(|e| match e {
        EngineError::Config(m) => CliError::Config(m),
        other => study_err(other),
    })?;

    let best = BestRecord {
        trial_id: result.best_trial,
        objective: result.best_objective,
        hyperparams: result.best.clone(),
        assignment: result.history[result.best_trial].assignment.clone(),
    };
    write_json(&out.join(BEST_FILE), &best)?;
    write_json(&out.join(MODEL_FILE), &result.final_model)?;
    write_json(&out.join(BUDGET_FILE), &result.budget)?;

    let (id, ood) = final_scores(&result.final_model, &data, &cfg)?;
    let summary = RunSummary {
        best: &result.best,
        best_trial: result.best_trial,
        objective: result.best_objective,
        id,
        ood,
        budget: result.budget,
    };
    println!("{}", serde_json::to_string(&summary).map_err(study_err)?);
    eprintln!(
        "best trial {} with objective {}; run directory {}",
        result.best_trial,
        fmt_f64(result.best_objective),
        out.display()
    );
    Ok(())
}

/// `autoft report`: summarizes a run directory without touching it.
///
/// With `normalize_ce` the loss weights of the listed trials are divided by
/// their cross-entropy weight.
pub fn cmd_report(dir: &Path, top: usize, normalize_ce: bool) -> Result<(), CliError> {
    let trials_path = dir.join(TRIALS_FILE);
    if !trials_path.is_file() {
        return Err(config_err(format!("{} not found", trials_path.display())));
    }
    let history = read_trials(&trials_path)?;
    let failed = history.iter().filter(|r| r.objective.is_none()).count();
    eprintln!("{} trials, {failed} failed", history.len());

    eprintln!("best-so-far trajectory:");
    let mut best: Option<f64> = None;
    for r in &history {
        if let Some(v) = r.score() {
            if best.is_none_or(|b| v > b) {
                best = Some(v);
                eprintln!("  trial {:>5}  {}", r.trial_id, fmt_f64(v));
            }
        }
    }

    let mut ranked: Vec<&TrialRecord> = history.iter().filter(|r| r.score().is_some()).collect();
    ranked.sort_by(|a, b| {
        b.score()
            .unwrap()
            .total_cmp(&a.score().unwrap())
            .then(a.trial_id.cmp(&b.trial_id))
    });
    eprintln!("top {} trials:", top.min(ranked.len()));
    for r in ranked.iter().take(top) {
        let ce = r
            .assignment
            .get(LossTerm::CrossEntropy.weight_name())
            .filter(|w| *w > 0.0);
        let scale = match (normalize_ce, ce) {
            (true, Some(w)) => 1.0 / w,
            _ => 1.0,
        };
        let params: Vec<String> = r
            .assignment
            .iter()
            .map(|(n, v)| {
                let v = if n.starts_with("w_") { v * scale } else { v };
                format!("{n}={v:.4e}")
            })
            .collect();
        eprintln!(
            "  trial {:>5}  {}  {}",
            r.trial_id,
            fmt_f64(r.score().unwrap()),
            params.join(" ")
        );
    }
    if best_of(&history).is_none() {
        eprintln!("no completed trials");
    }

    let model_path = dir.join(MODEL_FILE);
    if !model_path.is_file() {
        return Ok(());
    }
    let config_path = dir.join(CONFIG_FILE);
    if !config_path.is_file() {
        eprintln!(
            "warning: {} missing; skipping the ensembling curve",
            config_path.display()
        );
        return Ok(());
    }
    let resolved: ResolvedRun = parse_json(&read_text(&config_path)?, &config_path)?;
    let model: LinearModel = parse_json(&read_text(&model_path)?, &model_path)?;
    let cfg = &resolved.config;
    let data = run_data(cfg)?;
    let Some(id_val) = data.id_val.as_ref() else {
        eprintln!("warning: no ID validation split; skipping the ensembling curve");
        return Ok(());
    };
    let tests: Vec<&LabeledDataset> = data.tests.iter().collect();
    let (curve, alpha) =
        ensemble_sweep(&model, id_val, &tests, cfg.engine.metric, cfg.ensemble_grid)
            .map_err(study_err)?;
    let zeroshot = curve[0].ood_scores.clone();
    print!("{}", effective_robustness_rows(&curve, &zeroshot));
    eprintln!("chosen mixing coefficient: {alpha}");
    Ok(())
}

/// `autoft toy`: the three arms of the Gaussian experiment.
pub fn cmd_toy(
    d: usize,
    trials: usize,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    if d == 0 {
        return Err(config_err("--d must be positive"));
    }
    let cfg = DidacticConfig {
        dim: d,
        trials,
        vb: VbSettings {
            steps,
            ..VbSettings::default()
        },
        seed,
        ..DidacticConfig::default()
    };
    let _lock = DirLock::acquire(out)?;
    let result = didactic_run(&cfg).map_err(engine_err)?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| study_err(format!("cannot write {}: {e}", p.display())))
    };
    write("curves.csv", result.curves_csv())?;
    write("weights.csv", result.weights_csv())?;
    let mut summary = IndexMap::new();
    for a in &result.arms {
        let p = a.final_point();
        eprintln!(
            "{:<17} train NLL {:>12.4}  test NLL {:>12.4}",
            a.arm.name(),
            p.id_nll,
            p.ood_nll
        );
        summary.insert(
            a.arm.name(),
            serde_json::json!({"id_nll": p.id_nll, "ood_nll": p.ood_nll, "val_nll": a.val_nll}),
        );
    }
    println!("{}", serde_json::to_string(&summary).map_err(study_err)?);
    Ok(())
}

fn load_setup(path: Option<&Path>, seed: Option<u64>) -> Result<CompareSetup, CliError> {
    let mut setup = match path {
        Some(p) => parse_json(&read_text(p)?, p)?,
        None => CompareSetup::default(),
    };
    if let Some(s) = seed {
        setup.seed = s;
    }
    setup.engine.validate().map_err(engine_err)?;
    Ok(setup)
}

/// `autoft compare`: every sampler on the same repeats and budget.
pub fn cmd_compare(
    budget: usize,
    repeats: usize,
    samplers: &[SamplerKind],
    seed: Option<u64>,
    setup: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if budget == 0 || repeats == 0 || samplers.is_empty() {
        return Err(config_err(
            "budget, repeats and the sampler list must be nonempty",
        ));
    }
    let setup = load_setup(setup, seed)?;
    let _lock = DirLock::acquire(out)?;
    let table = compare_samplers(&setup, samplers, budget, repeats).map_err(engine_err)?;
    for (name, text) in [
        ("compare.csv", table.to_csv()),
        ("summary.csv", table.summary_csv()),
    ] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| study_err(format!("cannot write {}: {e}", p.display())))?;
    }
    for s in table.summary() {
        eprintln!(
            "{:<7} ID {:.4} (IQR {:.4})  OOD {:.4} (IQR {:.4})",
            s.sampler.name(),
            s.id_median,
            s.id_iqr,
            s.ood_median,
            s.ood_iqr
        );
    }
    print!("{}", table.summary_csv());
    Ok(())
}

/// `autoft ablate`: OOD versus ID validation data for the outer objective.
pub fn cmd_ablate(
    budget: usize,
    repeats: usize,
    seed: Option<u64>,
    setup: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if budget == 0 || repeats == 0 {
        return Err(config_err("budget and repeats must be positive"));
    }
    let setup = load_setup(setup, seed)?;
    let _lock = DirLock::acquire(out)?;
    let v = val_choice_ablation(&setup, budget, repeats).map_err(engine_err)?;
    let mut csv = String::from("repeat,ood_val,id_val\n");
    for (r, (a, b)) in v.ood_val.iter().zip(&v.id_val).enumerate() {
        csv.push_str(&format!("{r},{},{}\n", fmt_f64(*a), fmt_f64(*b)));
    }
    let p = out.join("val_choice.csv");
    fs::write(&p, &csv).map_err(|e| study_err(format!("cannot write {}: {e}", p.display())))?;
    eprintln!(
        "median OOD test score: OOD validation {:.4}, ID validation {:.4}",
        median(&v.ood_val),
        median(&v.id_val)
    );
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Parser)]
#[command(
    name = "autoft",
    version,
    about = "Learned fine-tuning objectives via hyperparameter search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a study described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Continue the study recorded in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Weighted variational fit of a diagonal Gaussian under shift.
    Toy {
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 300)]
        trials: usize,
        /// Inner optimization steps.
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare samplers on the spurious-blobs benchmark.
    Compare {
        /// Trials per study.
        #[arg(long, default_value_t = 100)]
        budget: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, value_delimiter = ',', default_value = "random,qmc,gp_ei,tpe")]
        samplers: Vec<SamplerKind>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON benchmark and engine settings.
        #[arg(long)]
        setup: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trials on OOD or on ID validation data.
    Ablate {
        #[arg(long, default_value_t = 100)]
        budget: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        setup: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// List loss weights relative to the cross-entropy weight.
        #[arg(long)]
        normalize_ce: bool,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Run { config, resume } => cmd_run(&config, resume),
        Command::Toy {
            d,
            trials,
            steps,
            seed,
            out,
        } => cmd_toy(d, trials, steps, seed, &out),
        Command::Compare {
            budget,
            repeats,
            samplers,
            seed,
            setup,
            out,
        } => cmd_compare(budget, repeats, &samplers, seed, setup.as_deref(), &out),
        Command::Ablate {
            budget,
            repeats,
            seed,
            setup,
            out,
        } => cmd_ablate(budget, repeats, seed, setup.as_deref(), &out),
        Command::Report {
            dir,
            top,
            normalize_ce,
        } => cmd_report(&dir, top, normalize_ce),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
