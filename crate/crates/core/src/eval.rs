//! Metrics, weight-space interpolation between the initial and fine-tuned
//! parameters, and the effective-robustness curve table.

use indexmap::IndexMap;

use crate::data::{fmt_f64, LabeledDataset};
use crate::engine::Metric;
use crate::losses::argmax;
use crate::models::{LinearModel, ModelError, ParamVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    Empty,
    #[error("dataset has no group tags")]
    NoGroups,
    #[error("{0} predictions for {1} labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("interpolation weight {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("grid needs at least two points, got {0}")]
    BadGrid(usize),
    #[error("curve csv line {line}: {message}")]
    Csv { line: usize, message: String },
}

/// Predicted class of every row; ties go to the lowest class index.
pub fn predictions(model: &LinearModel, ds: &LabeledDataset) -> Result<Vec<usize>, EvalError> {
    (0..ds.len())
        .map(|i| Ok(argmax(&model.logits(ds.row(i))?)))
        .collect()
}

pub fn top1_from_predictions(pred: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if pred.len() != labels.len() {
        return Err(EvalError::LengthMismatch(pred.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1 over `num_classes` classes. A class with
/// no true and no predicted rows has F1 = 0.
pub fn macro_f1_from_predictions(
    pred: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<f64, EvalError> {
    if pred.len() != labels.len() {
        return Err(EvalError::LengthMismatch(pred.len(), labels.len()));
    }
    if labels.is_empty() || num_classes == 0 {
        return Err(EvalError::Empty);
    }
    let k = num_classes.max(pred.iter().max().map_or(0, |m| m + 1));
    let (mut tp, mut fp, mut fnn) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&p, &y) in pred.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fnn[y] += 1;
        }
    }
    let f1 = |c: usize| {
        let denom = 2 * tp[c] + fp[c] + fnn[c];
        if denom == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / denom as f64
        }
    };
    Ok((0..num_classes).map(f1).sum::<f64>() / num_classes as f64)
}

/// Minimum per-group accuracy over non-empty groups.
pub fn worst_group_from_predictions(
    pred: &[usize],
    labels: &[usize],
    groups: &[usize],
) -> Result<f64, EvalError> {
    if pred.len() != labels.len() || groups.len() != labels.len() {
        return Err(EvalError::LengthMismatch(pred.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = groups.iter().max().map_or(0, |m| m + 1);
    let (mut hits, mut counts) = (vec![0usize; k], vec![0usize; k]);
    for ((p, y), g) in pred.iter().zip(labels).zip(groups) {
        counts[*g] += 1;
        if p == y {
            hits[*g] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .filter(|(_, c)| **c > 0)
        .map(|(h, c)| *h as f64 / *c as f64)
        .fold(f64::INFINITY, f64::min))
}

pub fn top1(model: &LinearModel, ds: &LabeledDataset) -> Result<f64, EvalError> {
    top1_from_predictions(&predictions(model, ds)?, ds.labels())
}

pub fn macro_f1(model: &LinearModel, ds: &LabeledDataset) -> Result<f64, EvalError> {
    macro_f1_from_predictions(&predictions(model, ds)?, ds.labels(), ds.num_classes())
}

pub fn worst_group_acc(model: &LinearModel, ds: &LabeledDataset) -> Result<f64, EvalError> {
    let groups = ds.groups().ok_or(EvalError::NoGroups)?;
    worst_group_from_predictions(&predictions(model, ds)?, ds.labels(), groups)
}

pub fn score(metric: Metric, model: &LinearModel, ds: &LabeledDataset) -> Result<f64, EvalError> {
    match metric {
        Metric::Top1 => top1(model, ds),
        Metric::MacroF1 => macro_f1(model, ds),
        Metric::WorstGroup => worst_group_acc(model, ds),
    }
}

/// `(1 - alpha) * theta0 + alpha * theta_ft`, exact at both endpoints.
pub fn wise_interpolate(
    theta0: &ParamVector,
    theta_ft: &ParamVector,
    alpha: f64,
) -> Result<ParamVector, EvalError> {
    if !theta0.same_layout(theta_ft) {
        return Err(ModelError::LayoutMismatch {
            expected: theta0.len(),
            got: theta_ft.len(),
        }
        .into());
    }
    if alpha == 0.0 {
        return Ok(theta0.clone());
    }
    if alpha == 1.0 {
        return Ok(theta_ft.clone());
    }
    let values = theta0
        .values()
        .iter()
        .zip(theta_ft.values())
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    Ok(theta0.with_values(values))
}

/// Scores at one interpolation weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub alpha: f64,
    /// Score on the ID validation set, which selects alpha.
    pub id_score: f64,
    pub ood_scores: IndexMap<String, f64>,
}

/// The uniform grid `{0, 1/(n-1), ..., 1}`.
pub fn alpha_grid(n: usize) -> Result<Vec<f64>, EvalError> {
    if n < 2 {
        return Err(EvalError::BadGrid(n));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

/// Interpolates between the model's initial and current parameters over an
/// `grid_size`-point grid. The chosen alpha maximizes the ID-validation
/// score; ties go to the larger alpha.
pub fn ensemble_sweep(
    model: &LinearModel,
    id_val: &LabeledDataset,
    tests: &[&LabeledDataset],
    metric: Metric,
    grid_size: usize,
) -> Result<(Vec<CurvePoint>, f64), EvalError> {
    let mut curve = Vec::with_capacity(grid_size);
    for alpha in alpha_grid(grid_size)? {
        let m = model.with_params(wise_interpolate(model.init(), &model.params, alpha)?)?;
        let mut ood_scores = IndexMap::new();
        for t in tests {
            ood_scores.insert(t.name.clone(), score(metric, &m, t)?);
        }
        curve.push(CurvePoint {
            alpha,
            id_score: score(metric, &m, id_val)?,
            ood_scores,
        });
    }
    let mut chosen = 0;
    for (i, p) in curve.iter().enumerate() {
        if p.id_score >= curve[chosen].id_score {
            chosen = i;
        }
    }
    let alpha = curve[chosen].alpha;
    Ok((curve, alpha))
}

/// CSV with header `alpha,id,<shifts>,<shift>_gain`; gains are relative to
/// `zeroshot` (missing shifts count as 0). Numbers carry 17 significant digits.
pub fn effective_robustness_rows(curve: &[CurvePoint], zeroshot: &IndexMap<String, f64>) -> String {
    let shifts: Vec<&String> = curve
        .first()
        .map(|p| p.ood_scores.keys().collect())
        .unwrap_or_default();
    let mut out = String::from("alpha,id");
    for s in &shifts {
        out.push(',');
        out.push_str(s);
    }
    for s in &shifts {
        out.push_str(&format!(",{s}_gain"));
    }
    out.push('\n');
    for p in curve {
        let mut row = vec![fmt_f64(p.alpha), fmt_f64(p.id_score)];
        for s in &shifts {
            row.push(fmt_f64(p.ood_scores[*s]));
        }
        for s in &shifts {
            row.push(fmt_f64(
                p.ood_scores[*s] - zeroshot.get(*s).copied().unwrap_or(0.0),
            ));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses the table written by [`effective_robustness_rows`] back into points.
pub fn parse_curve_csv(text: &str) -> Result<Vec<CurvePoint>, EvalError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or(EvalError::Csv {
            line: 1,
            message: "missing header".into(),
        })?
        .split(',')
        .collect();
    if header.len() < 2
        || header[0] != "alpha"
        || header[1] != "id"
        || !(header.len() - 2).is_multiple_of(2)
    {
        return Err(EvalError::Csv {
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let k = (header.len() - 2) / 2;
    let shifts = &header[2..2 + k];
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let bad = |message: String| EvalError::Csv {
            line: i + 2,
            message,
        };
        if cells.len() != header.len() {
            return Err(bad(format!(
                "{} cells, expected {}",
                cells.len(),
                header.len()
            )));
        }
        let nums: Vec<f64> = cells
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_, _>>()?;
        out.push(CurvePoint {
            alpha: nums[0],
            id_score: nums[1],
            ood_scores: shifts
                .iter()
                .zip(&nums[2..2 + k])
                .map(|(s, v)| (s.to_string(), *v))
                .collect(),
        });
    }
    Ok(out)
}
