//! The nine fine-tuning loss terms on a linear head and their weighted sum.
//!
//! Data terms act on the logits `s = M x + b`; parameter terms act on the flat
//! parameter vector and its initial snapshot. All values are batch or
//! parameter means, and every term returns its analytic gradient.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::models::{LinearHead, ParamVector};
use crate::searchspace::ParamAssignment;

/// Temperature of the contrastive term.
pub const CONTRASTIVE_TAU: f64 = 0.1;
/// Norms below this are clamped before dividing.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} outside {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch has {got} features, head expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{expected} parameters expected, got {got}")]
    ParamMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("loss weight `{name}` must be finite and nonnegative, got {value}")]
    InvalidWeight { name: String, value: f64 },
    #[error("missing loss weight `{0}`")]
    MissingWeight(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTerm {
    CrossEntropy,
    Hinge,
    Contrastive,
    Entropy,
    ConfidenceMin,
    L1Norm,
    L2Norm,
    L1Init,
    L2Init,
}

impl LossTerm {
    /// Canonical order; search-space coordinates follow it.
    pub const ALL: [LossTerm; 9] = [
        LossTerm::CrossEntropy,
        LossTerm::Hinge,
        LossTerm::Contrastive,
        LossTerm::Entropy,
        LossTerm::ConfidenceMin,
        LossTerm::L1Norm,
        LossTerm::L2Norm,
        LossTerm::L1Init,
        LossTerm::L2Init,
    ];

    pub const PARAMETER_TERMS: [LossTerm; 4] = [
        LossTerm::L1Norm,
        LossTerm::L2Norm,
        LossTerm::L1Init,
        LossTerm::L2Init,
    ];

    pub fn weight_name(self) -> &'static str {
        match self {
            LossTerm::CrossEntropy => "w_ce",
            LossTerm::Hinge => "w_hinge",
            LossTerm::Contrastive => "w_contrastive",
            LossTerm::Entropy => "w_entropy",
            LossTerm::ConfidenceMin => "w_confmin",
            LossTerm::L1Norm => "w_l1norm",
            LossTerm::L2Norm => "w_l2norm",
            LossTerm::L1Init => "w_l1init",
            LossTerm::L2Init => "w_l2init",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// True for the four terms that depend only on the parameters.
    pub fn is_parameter_term(self) -> bool {
        self.index() >= LossTerm::L1Norm.index()
    }

    fn label(self) -> &'static str {
        match self {
            LossTerm::CrossEntropy => "cross-entropy",
            LossTerm::Hinge => "hinge",
            LossTerm::Contrastive => "contrastive",
            LossTerm::Entropy => "entropy",
            LossTerm::ConfidenceMin => "confidence",
            LossTerm::L1Norm => "l1 norm",
            LossTerm::L2Norm => "l2 norm",
            LossTerm::L1Init => "l1 distance to init",
            LossTerm::L2Init => "l2 distance to init",
        }
    }
}

/// Coefficients of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_hinge: f64,
    pub w_contrastive: f64,
    pub w_entropy: f64,
    pub w_confmin: f64,
    pub w_l1norm: f64,
    pub w_l2norm: f64,
    pub w_l1init: f64,
    pub w_l2init: f64,
}

impl LossWeights {
    pub fn zeros() -> Self {
        Self::default()
    }

    /// All weights zero except `term`.
    pub fn only(term: LossTerm, w: f64) -> Self {
        let mut out = Self::zeros();
        out.set(term, w);
        out
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        let mut out = Self::zeros();
        for (t, v) in LossTerm::ALL.iter().zip(a) {
            out.set(*t, v);
        }
        out
    }

    pub fn to_array(&self) -> [f64; 9] {
        LossTerm::ALL.map(|t| self.get(t))
    }

    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::CrossEntropy => self.w_ce,
            LossTerm::Hinge => self.w_hinge,
            LossTerm::Contrastive => self.w_contrastive,
            LossTerm::Entropy => self.w_entropy,
            LossTerm::ConfidenceMin => self.w_confmin,
            LossTerm::L1Norm => self.w_l1norm,
            LossTerm::L2Norm => self.w_l2norm,
            LossTerm::L1Init => self.w_l1init,
            LossTerm::L2Init => self.w_l2init,
        }
    }

    pub fn set(&mut self, term: LossTerm, w: f64) {
        let slot = match term {
            LossTerm::CrossEntropy => &mut self.w_ce,
            LossTerm::Hinge => &mut self.w_hinge,
            LossTerm::Contrastive => &mut self.w_contrastive,
            LossTerm::Entropy => &mut self.w_entropy,
            LossTerm::ConfidenceMin => &mut self.w_confmin,
            LossTerm::L1Norm => &mut self.w_l1norm,
            LossTerm::L2Norm => &mut self.w_l2norm,
            LossTerm::L1Init => &mut self.w_l1init,
            LossTerm::L2Init => &mut self.w_l2init,
        };
        *slot = w;
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for t in LossTerm::ALL {
            let v = self.get(t);
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidWeight {
                    name: t.weight_name().to_string(),
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// Reads the nine weights from an assignment keyed by canonical names.
    pub fn from_assignment(a: &ParamAssignment) -> Result<Self, LossError> {
        let mut out = Self::zeros();
        for t in LossTerm::ALL {
            let v = a
                .get(t.weight_name())
                .ok_or_else(|| LossError::MissingWeight(t.weight_name().to_string()))?;
            out.set(t, v);
        }
        out.validate()?;
        Ok(out)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self::from_array(self.to_array().map(|v| alpha * v))
    }

    pub fn plus(&self, other: &LossWeights) -> Self {
        let (a, b) = (self.to_array(), other.to_array());
        Self::from_array(std::array::from_fn(|i| a[i] + b[i]))
    }

    /// Weights divided by `w_ce`, the reporting convention that pins the
    /// cross-entropy weight at 1. `None` when `w_ce` is zero.
    pub fn normalized_by_ce(&self) -> Option<Self> {
        (self.w_ce > 0.0).then(|| self.scaled(1.0 / self.w_ce))
    }
}

/// Value and gradient of one term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Per-term values, weighted total and total gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Indexed by [`LossTerm::index`]; `None` for skipped terms.
    pub values: [Option<f64>; 9],
    pub total: f64,
    pub gradient: Vec<f64>,
}

impl LossBreakdown {
    pub fn value(&self, term: LossTerm) -> Option<f64> {
        self.values[term.index()]
    }
}

/// Weights of the parameter terms on one slice of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerGroup {
    pub range: Range<usize>,
    pub l1norm: f64,
    pub l2norm: f64,
    pub l1init: f64,
    pub l2init: f64,
}

impl RegularizerGroup {
    fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::L1Norm => self.l1norm,
            LossTerm::L2Norm => self.l2norm,
            LossTerm::L1Init => self.l1init,
            LossTerm::L2Init => self.l2init,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CompositeOptions {
    /// Also evaluate terms whose weight is zero (reported, not added).
    pub report_all: bool,
}

fn check_inputs(
    head: &LinearHead,
    params: &[f64],
    batch: &LabeledDataset,
) -> Result<(), LossError> {
    if params.len() != head.param_count() {
        return Err(LossError::ParamMismatch {
            expected: head.param_count(),
            got: params.len(),
        });
    }
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if batch.dim() != head.dim {
        return Err(LossError::DimensionMismatch {
            expected: head.dim,
            got: batch.dim(),
        });
    }
    if let Some(&label) = batch.labels().iter().find(|&&y| y >= head.classes) {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: head.classes,
        });
    }
    Ok(())
}

/// `log softmax(s)` with max subtraction.
fn log_softmax(s: &[f64], out: &mut [f64]) {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(s) {
        *o = v - lse;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in s.iter().enumerate().skip(1) {
        if *v > s[best] {
            best = i;
        }
    }
    best
}

/// Per-sample term on one logit vector: returns the value and adds
/// `scale * d value / d logits` into `dlogits`.
fn sample_term(
    term: LossTerm,
    s: &[f64],
    y: usize,
    logp: &mut [f64],
    scale: f64,
    dlogits: &mut [f64],
) -> f64 {
    match term {
        LossTerm::CrossEntropy => {
            log_softmax(s, logp);
            for (k, d) in dlogits.iter_mut().enumerate() {
                let onehot = if k == y { 1.0 } else { 0.0 };
                *d += scale * (logp[k].exp() - onehot);
            }
            -logp[y]
        }
        LossTerm::Hinge => {
            let mut j = usize::MAX;
            for (k, v) in s.iter().enumerate() {
                if k != y && (j == usize::MAX || *v > s[j]) {
                    j = k;
                }
            }
            let margin = 1.0 + s[j] - s[y];
            if margin > 0.0 {
                dlogits[j] += scale;
                dlogits[y] -= scale;
                margin
            } else {
                0.0
            }
        }
        LossTerm::Entropy => {
            log_softmax(s, logp);
            let h: f64 = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
            for (k, d) in dlogits.iter_mut().enumerate() {
                *d -= scale * logp[k].exp() * (logp[k] + h);
            }
            h
        }
        LossTerm::ConfidenceMin => {
            log_softmax(s, logp);
            let k = argmax(s);
            let pk = logp[k].exp();
            for (j, d) in dlogits.iter_mut().enumerate() {
                let ind = if j == k { 1.0 } else { 0.0 };
                *d += scale * pk * (ind - logp[j].exp());
            }
            pk
        }
        _ => unreachable!("not a per-sample term"),
    }
}

/// Mean of a per-sample term with its gradient.
fn per_sample_term(
    term: LossTerm,
    head: &LinearHead,
    params: &ParamVector,
    batch: &LabeledDataset,
) -> Result<TermValue, LossError> {
    check_inputs(head, params.values(), batch)?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; head.param_count()];
    let mut s = vec![0.0; head.classes];
    let mut logp = vec![0.0; head.classes];
    let mut ds = vec![0.0; head.classes];
    let mut total = 0.0;
    for (i, &y) in batch.labels().iter().enumerate() {
        let x = batch.row(i);
        head.logits_into(params.values(), x, &mut s);
        ds.iter_mut().for_each(|d| *d = 0.0);
        total += sample_term(term, &s, y, &mut logp, 1.0 / n, &mut ds);
        head.backprop(x, &ds, &mut grad);
    }
    finish(term, total / n, grad)
}

fn finish(term: LossTerm, value: f64, grad: Vec<f64>) -> Result<TermValue, LossError> {
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(LossError::NonFinite(term.label()));
    }
    Ok(TermValue { value, grad })
}

pub fn cross_entropy_term(
    head: &LinearHead,
    params: &ParamVector,
    batch: &LabeledDataset,
) -> Result<TermValue, LossError> {
    per_sample_term(LossTerm::CrossEntropy, head, params, batch)
}

/// Crammer-Singer multiclass hinge with margin 1.
pub fn hinge_term(
    head: &LinearHead,
    params: &ParamVector,
    batch: &LabeledDataset,
) -> Result<TermValue, LossError> {
    per_sample_term(LossTerm::Hinge, head, params, batch)
}

/// Mean Shannon entropy of the predicted distribution.
pub fn entropy_term(
    head: &LinearHead,
    params: &ParamVector,
    batch: &LabeledDataset,
) -> Result<TermValue, LossError> {
    per_sample_term(LossTerm::Entropy, head, params, batch)
}

/// Mean maximum softmax probability.
pub fn confidence_min_term(
    head: &LinearHead,
    params: &ParamVector,
    batch: &LabeledDataset,
) -> Result<TermValue, LossError> {
    per_sample_term(LossTerm::ConfidenceMin, head, params, batch)
}

/// Symmetric InfoNCE between normalized inputs and normalized prototype rows
/// at temperature `CONTRASTIVE_TAU`.
pub fn contrastive_term(
    head: &LinearHead,
    params: &ParamVector,
    batch: &LabeledDataset,
) -> Result<TermValue, LossError> {
    contrastive_with_tau(head, params, batch, CONTRASTIVE_TAU)
}

fn normalized(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = norm.max(NORM_FLOOR);
    (v.iter().map(|a| a / denom).collect(), norm)
}

pub fn contrastive_with_tau(
    head: &LinearHead,
    params: &ParamVector,
    batch: &LabeledDataset,
    tau: f64,
) -> Result<TermValue, LossError> {
    check_inputs(head, params.values(), batch)?;
    let (n, c) = (batch.len(), head.classes);
    let xs: Vec<Vec<f64>> = (0..n).map(|i| normalized(batch.row(i)).0).collect();
    let protos: Vec<(Vec<f64>, f64)> = (0..c)
        .map(|k| normalized(head.prototype(params.values(), k)))
        .collect();
    let labels = batch.labels();
    // similarity logits
    let sim: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            protos
                .iter()
                .map(|(m, _)| x.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect()
        })
        .collect();
    let nf = n as f64;
    let mut g = vec![vec![0.0; c]; n];
    let mut row_loss = 0.0;
    let mut logp = vec![0.0; c];
    for i in 0..n {
        log_softmax(&sim[i], &mut logp);
        row_loss -= logp[labels[i]];
        for k in 0..c {
            let onehot = if k == labels[i] { 1.0 } else { 0.0 };
            g[i][k] += 0.5 * (logp[k].exp() - onehot) / nf;
        }
    }
    let mut counts = vec![0usize; c];
    for &y in labels {
        counts[y] += 1;
    }
    let mut col_loss = 0.0;
    let mut col = vec![0.0; n];
    let mut logq = vec![0.0; n];
    for k in 0..c {
        if counts[k] == 0 {
            continue;
        }
        for j in 0..n {
            col[j] = sim[j][k];
        }
        log_softmax(&col, &mut logq);
        for j in 0..n {
            if labels[j] == k {
                col_loss -= logq[j];
            }
            let target = if labels[j] == k { 1.0 } else { 0.0 };
            g[j][k] += 0.5 * (counts[k] as f64 * logq[j].exp() - target) / nf;
        }
    }
    let value = 0.5 * (row_loss + col_loss) / nf;

    let mut grad = vec![0.0; head.param_count()];
    for k in 0..c {
        let mut dm_hat = vec![0.0; head.dim];
        for i in 0..n {
            if g[i][k] != 0.0 {
                for (d, x) in dm_hat.iter_mut().zip(&xs[i]) {
                    *d += g[i][k] * x / tau;
                }
            }
        }
        let (m_hat, norm) = &protos[k];
        let out = &mut grad[k * head.dim..(k + 1) * head.dim];
        if *norm > NORM_FLOOR {
            let proj: f64 = m_hat.iter().zip(&dm_hat).map(|(a, b)| a * b).sum();
            for ((o, d), m) in out.iter_mut().zip(&dm_hat).zip(m_hat) {
                *o = (d - m * proj) / norm;
            }
        } else {
            for (o, d) in out.iter_mut().zip(&dm_hat) {
                *o = d / NORM_FLOOR;
            }
        }
    }
    finish(LossTerm::Contrastive, value, grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum over `range` of the parameter term's per-coordinate value, with the
/// gradient `scale * d/dθ` added into `grad`. Callers divide by the count.
fn parameter_term_sum(
    term: LossTerm,
    theta: &[f64],
    init: &[f64],
    range: Range<usize>,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    for i in range {
        let (v, g) = match term {
            LossTerm::L1Norm => (theta[i].abs(), sign(theta[i])),
            LossTerm::L2Norm => (theta[i] * theta[i], 2.0 * theta[i]),
            LossTerm::L1Init => {
                let r = theta[i] - init[i];
                (r.abs(), sign(r))
            }
            LossTerm::L2Init => {
                let r = theta[i] - init[i];
                (r * r, 2.0 * r)
            }
            _ => unreachable!("not a parameter term"),
        };
        total += v;
        grad[i] += scale * g;
    }
    total
}

fn parameter_term(
    term: LossTerm,
    params: &ParamVector,
    init: &ParamVector,
) -> Result<TermValue, LossError> {
    if params.len() != init.len() {
        return Err(LossError::ParamMismatch {
            expected: params.len(),
            got: init.len(),
        });
    }
    let n = params.len().max(1) as f64;
    let mut grad = vec![0.0; params.len()];
    let sum = parameter_term_sum(
        term,
        params.values(),
        init.values(),
        0..params.len(),
        1.0 / n,
        &mut grad,
    );
    finish(term, sum / n, grad)
}

/// Mean absolute parameter value.
pub fn l1_norm_term(params: &ParamVector) -> Result<TermValue, LossError> {
    parameter_term(LossTerm::L1Norm, params, params)
}

/// Mean squared parameter value.
pub fn l2_norm_term(params: &ParamVector) -> Result<TermValue, LossError> {
    parameter_term(LossTerm::L2Norm, params, params)
}

/// Mean absolute distance to the initial parameters.
pub fn l1_init_term(params: &ParamVector, init: &ParamVector) -> Result<TermValue, LossError> {
    parameter_term(LossTerm::L1Init, params, init)
}

/// Mean squared distance to the initial parameters.
pub fn l2_init_term(params: &ParamVector, init: &ParamVector) -> Result<TermValue, LossError> {
    parameter_term(LossTerm::L2Init, params, init)
}

/// Any single term by name.
pub fn term_value(
    term: LossTerm,
    head: &LinearHead,
    params: &ParamVector,
    init: &ParamVector,
    batch: &LabeledDataset,
) -> Result<TermValue, LossError> {
    match term {
        LossTerm::Contrastive => contrastive_term(head, params, batch),
        t if t.is_parameter_term() => parameter_term(t, params, init),
        t => per_sample_term(t, head, params, batch),
    }
}

/// `sum_i w_i L_i` with its gradient. Zero-weight terms are skipped.
pub fn composite_loss(
    head: &LinearHead,
    params: &ParamVector,
    init: &ParamVector,
    batch: &LabeledDataset,
    weights: &LossWeights,
    opts: CompositeOptions,
) -> Result<LossBreakdown, LossError> {
    let groups = [RegularizerGroup {
        range: 0..params.len(),
        l1norm: weights.w_l1norm,
        l2norm: weights.w_l2norm,
        l1init: weights.w_l1init,
        l2init: weights.w_l2init,
    }];
    composite_loss_grouped(head, params, init, batch, weights, &groups, opts)
}

/// Parameter-term segments of a grouped objective, in layout order.
pub fn segment_ranges(params: &ParamVector) -> Vec<(String, Range<usize>)> {
    params
        .layout()
        .iter()
        .map(|s| {
            (
                s.name.clone(),
                params.segment_range(&s.name).expect("segment from layout"),
            )
        })
        .collect()
}

/// Like [`composite_loss`], but each parameter term takes its weight from the
/// group covering the coordinate; the four parameter weights in `weights`
/// are ignored. Each group sum is divided by the total parameter count, so a
/// single group spanning everything reproduces the ungrouped objective.
pub fn composite_loss_grouped(
    head: &LinearHead,
    params: &ParamVector,
    init: &ParamVector,
    batch: &LabeledDataset,
    weights: &LossWeights,
    groups: &[RegularizerGroup],
    opts: CompositeOptions,
) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    check_inputs(head, params.values(), batch)?;
    if init.len() != params.len() {
        return Err(LossError::ParamMismatch {
            expected: params.len(),
            got: init.len(),
        });
    }
    for g in groups {
        for (name, v) in [
            ("w_l1norm", g.l1norm),
            ("w_l2norm", g.l2norm),
            ("w_l1init", g.l1init),
            ("w_l2init", g.l2init),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidWeight {
                    name: name.to_string(),
                    value: v,
                });
            }
        }
        if g.range.end > params.len() {
            return Err(LossError::ParamMismatch {
                expected: params.len(),
                got: g.range.end,
            });
        }
    }
    let p = params.len();
    let mut values = [None; 9];
    let mut total = 0.0;
    let mut gradient = vec![0.0; p];

    // per-sample data terms share one logit pass
    let sample_terms: Vec<(LossTerm, f64)> = [
        LossTerm::CrossEntropy,
        LossTerm::Hinge,
        LossTerm::Entropy,
        LossTerm::ConfidenceMin,
    ]
    .into_iter()
    .map(|t| (t, weights.get(t)))
    .filter(|(_, w)| *w != 0.0 || opts.report_all)
    .collect();
    if !sample_terms.is_empty() {
        let n = batch.len() as f64;
        let mut sums = [0.0; 9];
        let mut s = vec![0.0; head.classes];
        let mut logp = vec![0.0; head.classes];
        let mut ds = vec![0.0; head.classes];
        for (i, &y) in batch.labels().iter().enumerate() {
            let x = batch.row(i);
            head.logits_into(params.values(), x, &mut s);
            ds.iter_mut().for_each(|d| *d = 0.0);
            for &(t, w) in &sample_terms {
                sums[t.index()] += sample_term(t, &s, y, &mut logp, w / n, &mut ds);
            }
            head.backprop(x, &ds, &mut gradient);
        }
        for &(t, w) in &sample_terms {
            let v = sums[t.index()] / n;
            if !v.is_finite() {
                return Err(LossError::NonFinite(t.label()));
            }
            values[t.index()] = Some(v);
            total += w * v;
        }
    }

    let wc = weights.w_contrastive;
    if wc != 0.0 || opts.report_all {
        let tv = contrastive_term(head, params, batch)?;
        values[LossTerm::Contrastive.index()] = Some(tv.value);
        total += wc * tv.value;
        if wc != 0.0 {
            for (g, d) in gradient.iter_mut().zip(&tv.grad) {
                *g += wc * d;
            }
        }
    }

    let pf = p.max(1) as f64;
    let mut scratch = vec![0.0; p];
    for t in LossTerm::PARAMETER_TERMS {
        let active = groups.iter().any(|g| g.weight(t) != 0.0);
        if !active && !opts.report_all {
            continue;
        }
        // the reported value is the plain term over all parameters
        let plain =
            parameter_term_sum(t, params.values(), init.values(), 0..p, 0.0, &mut scratch) / pf;
        if !plain.is_finite() {
            return Err(LossError::NonFinite(t.label()));
        }
        values[t.index()] = Some(plain);
        for g in groups {
            let w = g.weight(t);
            if w == 0.0 {
                continue;
            }
            let sum = parameter_term_sum(
                t,
                params.values(),
                init.values(),
                g.range.clone(),
                w / pf,
                &mut gradient,
            );
            total += w * sum / pf;
        }
    }
    if !total.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
        return Err(LossError::NonFinite("composite"));
    }
    Ok(LossBreakdown {
        values,
        total,
        gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(x: Vec<Vec<f64>>, y: Vec<usize>, classes: usize) -> LabeledDataset {
        let d = x[0].len();
        let n = x.len();
        let m = Matrix::new(n, d, x.into_iter().flatten().collect()).unwrap();
        LabeledDataset::with_classes("t", m, y, None, classes).unwrap()
    }

    fn params_from(head: &LinearHead, values: Vec<f64>) -> ParamVector {
        ParamVector::new(head.layout(), values).unwrap()
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        c: usize,
        d: usize,
        n: usize,
    ) -> (LinearHead, ParamVector, ParamVector, LabeledDataset) {
        let head = LinearHead::new(c, d);
        let p = params_from(
            &head,
            (0..head.param_count())
                .map(|_| rng.random_range(-1.5..1.5))
                .collect(),
        );
        let init = params_from(
            &head,
            (0..head.param_count())
                .map(|_| rng.random_range(-1.5..1.5))
                .collect(),
        );
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        (head, p, init, dataset(x, y, c))
    }

    /// Naive log-softmax written from the definition.
    fn naive_softmax(s: &[f64]) -> Vec<f64> {
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        s.iter().map(|v| v.exp() / z).collect()
    }

    fn naive_logits(head: &LinearHead, p: &[f64], x: &[f64]) -> Vec<f64> {
        (0..head.classes)
            .map(|c| {
                let mut acc = p[head.classes * head.dim + c];
                for j in 0..head.dim {
                    acc += p[c * head.dim + j] * x[j];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn cross_entropy_examples() {
        let head = LinearHead::new(10, 2);
        let p = ParamVector::zeros(head.layout());
        let b = dataset(vec![vec![0.3, -1.0]], vec![4], 10);
        let v = cross_entropy_term(&head, &p, &b).unwrap().value;
        assert!((v - 10f64.ln()).abs() < 1e-12);

        let head = LinearHead::new(3, 1);
        let mut vals = vec![0.0; head.param_count()];
        vals[head.bias_offset() + 1] = 50.0;
        let p = params_from(&head, vals);
        let b = dataset(vec![vec![0.0]], vec![1], 3);
        assert!(cross_entropy_term(&head, &p, &b).unwrap().value < 1e-20);
    }

    #[test]
    fn per_sample_terms_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (head, p, _, b) = random_instance(&mut rng, 3, 4, 5);
        let (mut ce, mut hinge, mut ent, mut conf) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..b.len() {
            let s = naive_logits(&head, p.values(), b.row(i));
            let q = naive_softmax(&s);
            let y = b.labels()[i];
            ce += -q[y].ln();
            let other = (0..3)
                .filter(|&k| k != y)
                .map(|k| s[k])
                .fold(f64::NEG_INFINITY, f64::max);
            hinge += (1.0 + other - s[y]).max(0.0);
            ent += -q.iter().map(|v| v * v.ln()).sum::<f64>();
            conf += q.iter().cloned().fold(0.0, f64::max);
        }
        let n = b.len() as f64;
        assert!((cross_entropy_term(&head, &p, &b).unwrap().value - ce / n).abs() < 1e-12);
        assert!((hinge_term(&head, &p, &b).unwrap().value - hinge / n).abs() < 1e-12);
        assert!((entropy_term(&head, &p, &b).unwrap().value - ent / n).abs() < 1e-12);
        assert!((confidence_min_term(&head, &p, &b).unwrap().value - conf / n).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        let head = LinearHead::new(3, 1);
        let mut vals = vec![0.0; head.param_count()];
        vals[head.bias_offset()] = 2.0;
        let p = params_from(&head, vals);
        let satisfied = dataset(vec![vec![0.0]], vec![0], 3);
        assert_eq!(hinge_term(&head, &p, &satisfied).unwrap().value, 0.0);
        let flat = ParamVector::zeros(head.layout());
        assert_eq!(hinge_term(&head, &flat, &satisfied).unwrap().value, 1.0);
        let both = dataset(vec![vec![0.0], vec![0.0]], vec![0, 1], 3);
        // sample 0 satisfied, sample 1 has margin 1 + 2 - 0 = 3
        assert!((hinge_term(&head, &p, &both).unwrap().value - 1.5).abs() < 1e-15);
    }

    #[test]
    fn entropy_and_confidence_examples() {
        let head = LinearHead::new(10, 1);
        let p = ParamVector::zeros(head.layout());
        let b = dataset(vec![vec![1.0]], vec![0], 10);
        assert!((entropy_term(&head, &p, &b).unwrap().value - 10f64.ln()).abs() < 1e-12);
        assert!((confidence_min_term(&head, &p, &b).unwrap().value - 0.1).abs() < 1e-12);

        let head = LinearHead::new(2, 1);
        let p = ParamVector::zeros(head.layout());
        let b = dataset(vec![vec![1.0]], vec![0], 2);
        assert!((entropy_term(&head, &p, &b).unwrap().value - 2f64.ln()).abs() < 1e-12);

        let mut vals = vec![0.0; head.param_count()];
        vals[head.bias_offset()] = 800.0;
        let p = params_from(&head, vals);
        assert!(entropy_term(&head, &p, &b).unwrap().value.abs() < 1e-300);
        assert_eq!(confidence_min_term(&head, &p, &b).unwrap().value, 1.0);
    }

    #[test]
    fn binary_entropy_and_confidence_are_anti_monotone() {
        let head = LinearHead::new(2, 1);
        let b = dataset(vec![vec![1.0]], vec![0], 2);
        let mut last = (f64::INFINITY, 0.0);
        for k in 0..50 {
            let mut vals = vec![0.0; head.param_count()];
            vals[head.bias_offset()] = 0.2 * k as f64;
            let p = params_from(&head, vals);
            let h = entropy_term(&head, &p, &b).unwrap().value;
            let c = confidence_min_term(&head, &p, &b).unwrap().value;
            if k > 0 {
                assert!(h < last.0 && c > last.1);
            }
            last = (h, c);
        }
    }

    #[test]
    fn parameter_term_examples() {
        let head = LinearHead::new(1, 1);
        let p = params_from(&head, vec![3.0, -4.0]);
        assert_eq!(l2_norm_term(&p).unwrap().value, 12.5);
        assert_eq!(l1_norm_term(&p).unwrap().value, 3.5);
        assert_eq!(
            l1_norm_term(&ParamVector::zeros(head.layout()))
                .unwrap()
                .value,
            0.0
        );
        assert_eq!(l2_init_term(&p, &p).unwrap().value, 0.0);
        let init = params_from(&head, vec![2.0, -5.0]);
        assert_eq!(l2_init_term(&p, &init).unwrap().value, 1.0);
        assert_eq!(l1_init_term(&p, &init).unwrap().grad, vec![0.5, 0.5]);
        // sign(0) = 0
        assert_eq!(
            l1_norm_term(&ParamVector::zeros(head.layout()))
                .unwrap()
                .grad,
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn distance_terms_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, p, init, _) = random_instance(&mut rng, 4, 6, 1);
        let n = p.len() as f64;
        let l1: f64 = p
            .values()
            .iter()
            .zip(init.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let l2: f64 = p
            .values()
            .iter()
            .zip(init.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        assert!((l1_init_term(&p, &init).unwrap().value - l1).abs() < 1e-12);
        assert!((l2_init_term(&p, &init).unwrap().value - l2).abs() < 1e-12);
    }

    /// Double-loop similarity oracle for the symmetric contrastive loss.
    fn naive_contrastive(head: &LinearHead, p: &[f64], b: &LabeledDataset, tau: f64) -> f64 {
        let n = b.len();
        let unit = |v: &[f64]| {
            let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| a / nrm).collect::<Vec<f64>>()
        };
        let mut sim = vec![vec![0.0; head.classes]; n];
        for i in 0..n {
            let x = unit(b.row(i));
            for c in 0..head.classes {
                let m = unit(&p[c * head.dim..(c + 1) * head.dim]);
                let mut dot = 0.0;
                for j in 0..head.dim {
                    dot += x[j] * m[j];
                }
                sim[i][c] = dot / tau;
            }
        }
        let mut a = 0.0;
        let mut bsum = 0.0;
        for i in 0..n {
            let y = b.labels()[i];
            let z: f64 = (0..head.classes).map(|c| sim[i][c].exp()).sum();
            a += -(sim[i][y].exp() / z).ln();
            let zc: f64 = (0..n).map(|j| sim[j][y].exp()).sum();
            bsum += -(sim[i][y].exp() / zc).ln();
        }
        0.5 * (a + bsum) / n as f64
    }

    #[test]
    fn contrastive_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (head, p, _, b) = random_instance(&mut rng, 4, 5, 7);
            let v = contrastive_term(&head, &p, &b).unwrap().value;
            let o = naive_contrastive(&head, p.values(), &b, CONTRASTIVE_TAU);
            assert!((v - o).abs() < 1e-10, "{v} vs {o}");
        }
    }

    #[test]
    fn contrastive_alignment_limits() {
        // features equal to prototypes, one per class
        let head = LinearHead::new(3, 3);
        let mut vals = vec![0.0; head.param_count()];
        for c in 0..3 {
            vals[c * 3 + c] = 1.0;
        }
        let p = params_from(&head, vals);
        let b = dataset(
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            vec![0, 1, 2],
            3,
        );
        let v = contrastive_with_tau(&head, &p, &b, 0.01).unwrap().value;
        assert!(v < 1e-3, "{v}");

        // features orthogonal to every prototype
        let head = LinearHead::new(4, 8);
        let mut vals = vec![0.0; head.param_count()];
        for c in 0..4 {
            vals[c * 8 + c] = 1.0;
        }
        let p = params_from(&head, vals);
        let x: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 8];
                v[4 + i] = 1.0;
                v
            })
            .collect();
        let b = dataset(x, vec![0, 1, 2, 3], 4);
        for tau in [0.05, 0.1, 1.0] {
            let v = contrastive_with_tau(&head, &p, &b, tau).unwrap().value;
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_terms_stay_finite_at_large_logits() {
        let head = LinearHead::new(3, 1);
        let p = params_from(&head, vec![1e4, -1e4, 0.0, 0.0, 0.0, 0.0]);
        let b = dataset(vec![vec![1.0], vec![-1.0]], vec![1, 2], 3);
        for t in [
            LossTerm::CrossEntropy,
            LossTerm::Entropy,
            LossTerm::ConfidenceMin,
            LossTerm::Hinge,
        ] {
            let tv = term_value(t, &head, &p, &p, &b).unwrap();
            assert!(tv.value.is_finite());
        }
    }

    #[test]
    fn composite_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (head, p, init, b) = random_instance(&mut rng, 3, 4, 6);
        let zero = composite_loss(
            &head,
            &p,
            &init,
            &b,
            &LossWeights::zeros(),
            CompositeOptions::default(),
        )
        .unwrap();
        assert_eq!(zero.total, 0.0);
        assert!(zero.gradient.iter().all(|g| *g == 0.0));
        assert!(zero.values.iter().all(|v| v.is_none()));
        let all = composite_loss(
            &head,
            &p,
            &init,
            &b,
            &LossWeights::zeros(),
            CompositeOptions { report_all: true },
        )
        .unwrap();
        assert!(all.values.iter().all(|v| v.is_some()));

        let ce = composite_loss(
            &head,
            &p,
            &init,
            &b,
            &LossWeights::only(LossTerm::CrossEntropy, 1.0),
            CompositeOptions::default(),
        )
        .unwrap();
        let direct = cross_entropy_term(&head, &p, &b).unwrap();
        assert_eq!(ce.total, direct.value);
        assert_eq!(ce.gradient, direct.grad);
    }

    #[test]
    fn single_group_matches_ungrouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (head, p, init, b) = random_instance(&mut rng, 3, 4, 6);
        let w = LossWeights::from_array([0.3, 0.2, 0.1, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        let a = composite_loss(&head, &p, &init, &b, &w, CompositeOptions::default()).unwrap();
        let halves: Vec<RegularizerGroup> = segment_ranges(&p)
            .into_iter()
            .map(|(_, range)| RegularizerGroup {
                range,
                l1norm: 0.6,
                l2norm: 0.7,
                l1init: 0.8,
                l2init: 0.9,
            })
            .collect();
        let g = composite_loss_grouped(
            &head,
            &p,
            &init,
            &b,
            &w,
            &halves,
            CompositeOptions::default(),
        )
        .unwrap();
        assert!((a.total - g.total).abs() < 1e-12);
        for (x, y) in a.gradient.iter().zip(&g.gradient) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Moves every input at least `gap` away from hinge and absolute-value kinks.
    fn nudge_from_kinks(
        head: &LinearHead,
        p: &mut ParamVector,
        init: &ParamVector,
        b: &LabeledDataset,
        gap: f64,
    ) {
        for (v, i0) in p.values_mut().iter_mut().zip(init.values()) {
            if v.abs() < gap {
                *v += 2.0 * gap * sign(*v + 1e-300);
            }
            if (*v - i0).abs() < gap {
                *v += 2.0 * gap;
            }
            if v.abs() < gap {
                *v += 2.0 * gap;
            }
        }
        // push hinge margins off 0 through the bias of the true class
        for _ in 0..20 {
            let mut moved = false;
            for i in 0..b.len() {
                let s = naive_logits(head, p.values(), b.row(i));
                let y = b.labels()[i];
                let mut order: Vec<usize> = (0..head.classes).filter(|&k| k != y).collect();
                order.sort_by(|a, c| s[*c].partial_cmp(&s[*a]).unwrap());
                let margin = 1.0 + s[order[0]] - s[y];
                let runner_gap = if order.len() > 1 {
                    s[order[0]] - s[order[1]]
                } else {
                    1.0
                };
                let top_gap = {
                    let mut sorted = s.clone();
                    sorted.sort_by(|a, c| c.partial_cmp(a).unwrap());
                    sorted[0] - sorted[1]
                };
                if margin.abs() < gap || runner_gap < gap || top_gap < gap {
                    let bo = head.bias_offset();
                    p.values_mut()[bo + y] += 3.0 * gap;
                    p.values_mut()[bo + order[0]] -= 7.0 * gap;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
    }

    fn fd_check(
        head: &LinearHead,
        p: &ParamVector,
        init: &ParamVector,
        b: &LabeledDataset,
        w: &LossWeights,
    ) -> f64 {
        let opts = CompositeOptions::default();
        let analytic = composite_loss(head, p, init, b, w, opts).unwrap().gradient;
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.values_mut()[i] += h;
            let mut minus = p.clone();
            minus.values_mut()[i] -= h;
            let fp = composite_loss(head, &plus, init, b, w, opts).unwrap().total;
            let fm = composite_loss(head, &minus, init, b, w, opts)
                .unwrap()
                .total;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn each_term_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for t in LossTerm::ALL {
            for _ in 0..5 {
                let (head, mut p, init, b) = random_instance(&mut rng, 4, 6, 9);
                nudge_from_kinks(&head, &mut p, &init, &b, 1e-3);
                let err = fd_check(&head, &p, &init, &b, &LossWeights::only(t, 1.0));
                assert!(err <= 1e-4, "{t:?}: {err}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn composite_is_linear_in_weights(seed in any::<u64>(), alpha in 0.0f64..5.0, w in prop::array::uniform9(0.0f64..3.0), v in prop::array::uniform9(0.0f64..3.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (head, p, init, b) = random_instance(&mut rng, 3, 5, 7);
            let opts = CompositeOptions::default();
            let w1 = LossWeights::from_array(w);
            let w2 = LossWeights::from_array(v);
            let base = composite_loss(&head, &p, &init, &b, &w1, opts).unwrap();
            let scaled = composite_loss(&head, &p, &init, &b, &w1.scaled(alpha), opts).unwrap();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-12) + 1e-14;
            prop_assert!(close(scaled.total, alpha * base.total));
            for (s, g) in scaled.gradient.iter().zip(&base.gradient) {
                prop_assert!(close(*s, alpha * g));
            }
            let other = composite_loss(&head, &p, &init, &b, &w2, opts).unwrap();
            let sum = composite_loss(&head, &p, &init, &b, &w1.plus(&w2), opts).unwrap();
            prop_assert!(close(sum.total, base.total + other.total));
            for ((s, a), c) in sum.gradient.iter().zip(&base.gradient).zip(&other.gradient) {
                prop_assert!((s - (a + c)).abs() <= 1e-10 * s.abs().max(1.0));
            }
            let recomputed: f64 = LossTerm::ALL.iter().map(|t| w1.get(*t) * base.value(*t).unwrap_or(0.0)).sum();
            prop_assert!(close(base.total, recomputed));
        }

        #[test]
        fn term_values_are_finite(seed in any::<u64>(), scale in 1.0f64..1e4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (head, p, init, b) = random_instance(&mut rng, 4, 3, 5);
            let big = p.with_values(p.values().iter().map(|v| v * scale / 3.0).collect());
            for t in LossTerm::ALL {
                let tv = term_value(t, &head, &big, &init, &b).unwrap();
                prop_assert!(tv.value.is_finite());
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let head = LinearHead::new(2, 2);
        let p = ParamVector::zeros(head.layout());
        let b = dataset(vec![vec![0.0, 1.0]], vec![1], 2);
        let mut w = LossWeights::only(LossTerm::CrossEntropy, 1.0);
        w.w_hinge = -1.0;
        assert!(matches!(
            composite_loss(&head, &p, &p, &b, &w, CompositeOptions::default()),
            Err(LossError::InvalidWeight { .. })
        ));
        let empty = b.subset(&[]);
        assert_eq!(
            cross_entropy_term(&head, &p, &empty),
            Err(LossError::EmptyBatch)
        );
        let wrong = LinearHead::new(3, 2);
        assert!(cross_entropy_term(&wrong, &p, &b).is_err());
    }

    #[test]
    fn weights_serialize_by_canonical_name() {
        let w = LossWeights::from_array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let json = serde_json::to_value(w).unwrap();
        for (t, v) in LossTerm::ALL.iter().zip(1..) {
            assert_eq!(json[t.weight_name()], v as f64);
        }
        let back: LossWeights = serde_json::from_value(json).unwrap();
        assert_eq!(back, w);
        assert_eq!(w.normalized_by_ce().unwrap().w_ce, 1.0);
    }
}
