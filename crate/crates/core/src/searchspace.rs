//! Hyperparameter domains and the unit-cube coordinates samplers work in.
//!
//! Every domain maps bijectively onto `[0, 1]`: log-uniform domains through the
//! log of the value, uniform domains affinely, and integer domains through
//! equal-width buckets so each integer carries the same prior mass.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::losses::LossTerm;

/// Name of the learning-rate dimension in the canonical space.
pub const ETA: &str = "eta";
/// Name of the weight-decay dimension in the canonical space.
pub const DELTA: &str = "delta";
/// Name of the seed dimension in the canonical space.
pub const SIGMA: &str = "sigma";

/// Lower end of the loss-weight prior.
pub const WEIGHT_MIN: f64 = 1e-4;
/// Upper end of the loss-weight prior.
pub const WEIGHT_MAX: f64 = 10.0;
/// Seeds are searched over this inclusive integer range.
pub const SEED_RANGE: (i64, i64) = (0, 100);

/// Dimensions duplicated per group by [`grouped_space`].
pub const GROUPED_NAMES: [&str; 6] = [ETA, DELTA, "w_l1norm", "w_l2norm", "w_l1init", "w_l2init"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpaceError {
    #[error("invalid domain for `{name}`: {reason}")]
    InvalidDomain { name: String, reason: String },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("value {value} for `{name}` lies outside its domain {domain}")]
    OutOfDomain {
        name: String,
        value: f64,
        domain: ParamDomain,
    },
    #[error("assignment is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("assignment has unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("expected {expected} unit coordinates, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unit coordinate {value} for `{name}` is outside [0, 1]")]
    UnitOutOfRange { name: String, value: f64 },
    #[error("group list is empty")]
    EmptyGroups,
    #[error("duplicate group name `{0}`")]
    DuplicateGroup(String),
    #[error("reference learning rate must be positive and finite, got {0}")]
    InvalidEtaStar(f64),
}

/// A one-dimensional prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamDomain {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    IntUniform { lo: i64, hi: i64 },
}

impl std::fmt::Display for ParamDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamDomain::LogUniform { lo, hi } => write!(f, "LogUniform({lo}, {hi})"),
            ParamDomain::Uniform { lo, hi } => write!(f, "Uniform({lo}, {hi})"),
            ParamDomain::IntUniform { lo, hi } => write!(f, "IntUniform({lo}, {hi})"),
        }
    }
}

impl ParamDomain {
    pub fn validate(&self, name: &str) -> Result<(), SpaceError> {
        let bad = |reason: &str| {
            Err(SpaceError::InvalidDomain {
                name: name.to_string(),
                reason: reason.to_string(),
            })
        };
        match *self {
            ParamDomain::LogUniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) {
                    return bad("bounds must be finite");
                }
                if lo <= 0.0 {
                    return bad("log-uniform lower bound must be positive");
                }
                if lo >= hi {
                    return bad("lower bound must be below upper bound");
                }
            }
            ParamDomain::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) {
                    return bad("bounds must be finite");
                }
                if lo >= hi {
                    return bad("lower bound must be below upper bound");
                }
            }
            ParamDomain::IntUniform { lo, hi } => {
                if lo > hi {
                    return bad("lower bound must not exceed upper bound");
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        match *self {
            ParamDomain::LogUniform { lo, hi } | ParamDomain::Uniform { lo, hi } => {
                v >= lo && v <= hi
            }
            ParamDomain::IntUniform { lo, hi } => {
                v.fract() == 0.0 && v >= lo as f64 && v <= hi as f64
            }
        }
    }

    pub fn is_integer(&self) -> bool {
        matches!(self, ParamDomain::IntUniform { .. })
    }

    /// Number of integer buckets, or `None` for continuous domains.
    pub fn buckets(&self) -> Option<u64> {
        match *self {
            ParamDomain::IntUniform { lo, hi } => Some((hi - lo) as u64 + 1),
            _ => None,
        }
    }

    /// Maps a value inside the domain to `[0, 1]`.
    pub fn to_unit(&self, v: f64) -> f64 {
        match *self {
            ParamDomain::LogUniform { lo, hi } => (v.ln() - lo.ln()) / (hi.ln() - lo.ln()),
            ParamDomain::Uniform { lo, hi } => (v - lo) / (hi - lo),
            ParamDomain::IntUniform { lo, hi } => (v - lo as f64 + 0.5) / ((hi - lo) as f64 + 1.0),
        }
    }

    /// Maps a unit coordinate back into the domain. Endpoints are exact.
    pub fn from_unit(&self, u: f64) -> f64 {
        match *self {
            ParamDomain::LogUniform { lo, hi } => {
                if u <= 0.0 {
                    lo
                } else if u >= 1.0 {
                    hi
                } else {
                    (lo.ln() + u * (hi.ln() - lo.ln())).exp().clamp(lo, hi)
                }
            }
            ParamDomain::Uniform { lo, hi } => {
                if u <= 0.0 {
                    lo
                } else if u >= 1.0 {
                    hi
                } else {
                    (lo + u * (hi - lo)).clamp(lo, hi)
                }
            }
            ParamDomain::IntUniform { lo, hi } => {
                let width = (hi - lo) as f64 + 1.0;
                let k = (u * width).floor().clamp(0.0, width - 1.0);
                lo as f64 + k
            }
        }
    }

    /// Snaps a unit coordinate to the midpoint of its integer bucket.
    /// Continuous domains return `u` unchanged.
    pub fn snap_unit(&self, u: f64) -> f64 {
        match self.buckets() {
            Some(_) => self.to_unit(self.from_unit(u)),
            None => u,
        }
    }
}

/// Ordered, uniquely named set of parameter domains.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    dims: IndexMap<String, ParamDomain>,
}

/// Assignment of a value to every parameter of a space, in space order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamAssignment {
    values: IndexMap<String, f64>,
}

impl ParamAssignment {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.values.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.values.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl FromIterator<(String, f64)> for ParamAssignment {
    fn from_iter<I: IntoIterator<Item = (String, f64)>>(iter: I) -> Self {
        Self {
            values: iter.into_iter().collect(),
        }
    }
}

impl SearchSpace {
    pub fn new() -> Self {
        Self {
            dims: IndexMap::new(),
        }
    }

    /// Builds a space from `(name, domain)` pairs, validating every domain.
    pub fn from_dims<I, S>(dims: I) -> Result<Self, SpaceError>
    where
        I: IntoIterator<Item = (S, ParamDomain)>,
        S: Into<String>,
    {
        let mut space = Self::new();
        for (name, domain) in dims {
            space.push(name, domain)?;
        }
        Ok(space)
    }

    pub fn push(&mut self, name: impl Into<String>, domain: ParamDomain) -> Result<(), SpaceError> {
        let name = name.into();
        domain.validate(&name)?;
        if self.dims.contains_key(&name) {
            return Err(SpaceError::DuplicateName(name));
        }
        self.dims.insert(name, domain);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn domain(&self, name: &str) -> Option<&ParamDomain> {
        self.dims.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.dims.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamDomain)> {
        self.dims.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.dims.keys().map(String::as_str)
    }

    /// Checks that `a` assigns an in-domain value to exactly this space's names.
    pub fn validate(&self, a: &ParamAssignment) -> Result<(), SpaceError> {
        for (name, _) in a.iter() {
            if !self.dims.contains_key(name) {
                return Err(SpaceError::UnknownParameter(name.to_string()));
            }
        }
        for (name, domain) in &self.dims {
            let v = a
                .get(name)
                .ok_or_else(|| SpaceError::MissingParameter(name.clone()))?;
            if !domain.contains(v) {
                return Err(SpaceError::OutOfDomain {
                    name: name.clone(),
                    value: v,
                    domain: *domain,
                });
            }
        }
        Ok(())
    }

    pub fn to_unit(&self, a: &ParamAssignment) -> Result<Vec<f64>, SpaceError> {
        self.validate(a)?;
        Ok(self
            .dims
            .iter()
            .map(|(name, domain)| domain.to_unit(a.get(name).expect("validated")))
            .collect())
    }

    pub fn from_unit(&self, u: &[f64]) -> Result<ParamAssignment, SpaceError> {
        if u.len() != self.dims.len() {
            return Err(SpaceError::LengthMismatch {
                expected: self.dims.len(),
                got: u.len(),
            });
        }
        self.dims
            .iter()
            .zip(u)
            .map(|((name, domain), &ui)| {
                if !(0.0..=1.0).contains(&ui) {
                    return Err(SpaceError::UnitOutOfRange {
                        name: name.clone(),
                        value: ui,
                    });
                }
                Ok((name.clone(), domain.from_unit(ui)))
            })
            .collect()
    }

    /// Draws an assignment from the prior (uniform in unit coordinates).
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamAssignment {
        let u: Vec<f64> = (0..self.len()).map(|_| rng.random::<f64>()).collect();
        self.from_unit(&u).expect("unit draws are in range")
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self::new()
    }
}

/// Options for the canonical space beyond the reference learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoFtSpaceOptions {
    pub eta_star: f64,
    /// Prior for weight decay; `Uniform(0, 1)` unless overridden.
    pub decay: ParamDomain,
}

impl AutoFtSpaceOptions {
    pub fn new(eta_star: f64) -> Self {
        Self {
            eta_star,
            decay: ParamDomain::Uniform { lo: 0.0, hi: 1.0 },
        }
    }
}

/// The twelve-dimensional space: nine loss weights, then learning rate,
/// weight decay and seed.
pub fn default_autoft_space(eta_star: f64) -> Result<SearchSpace, SpaceError> {
    autoft_space(&AutoFtSpaceOptions::new(eta_star))
}

pub fn autoft_space(opts: &AutoFtSpaceOptions) -> Result<SearchSpace, SpaceError> {
    let eta_star = opts.eta_star;
    if !(eta_star.is_finite() && eta_star > 0.0) {
        return Err(SpaceError::InvalidEtaStar(eta_star));
    }
    let mut space = SearchSpace::new();
    for term in LossTerm::ALL {
        space.push(
            term.weight_name(),
            ParamDomain::LogUniform {
                lo: WEIGHT_MIN,
                hi: WEIGHT_MAX,
            },
        )?;
    }
    space.push(
        ETA,
        ParamDomain::LogUniform {
            lo: 1e-2 * eta_star,
            hi: 1e2 * eta_star,
        },
    )?;
    space.push(DELTA, opts.decay)?;
    space.push(
        SIGMA,
        ParamDomain::IntUniform {
            lo: SEED_RANGE.0,
            hi: SEED_RANGE.1,
        },
    )?;
    Ok(space)
}

/// Name of the per-group copy of `base_name`.
pub fn group_param_name(base_name: &str, group: &str) -> String {
    format!("{base_name}_{group}")
}

/// Replaces learning rate, weight decay and the four norm/distance weights
/// with one copy per group. Copies sit where the original dimension was.
pub fn grouped_space(base: &SearchSpace, groups: &[&str]) -> Result<SearchSpace, SpaceError> {
    if groups.is_empty() {
        return Err(SpaceError::EmptyGroups);
    }
    for (i, g) in groups.iter().enumerate() {
        if groups[..i].contains(g) {
            return Err(SpaceError::DuplicateGroup(g.to_string()));
        }
    }
    for name in GROUPED_NAMES {
        if !base.contains(name) {
            return Err(SpaceError::MissingParameter(name.to_string()));
        }
    }
    let mut out = SearchSpace::new();
    for (name, domain) in base.iter() {
        if GROUPED_NAMES.contains(&name) {
            for g in groups {
                out.push(group_param_name(name, g), *domain)?;
            }
        } else {
            out.push(name, *domain)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimensionRecord {
    name: String,
    kind: DomainKind,
    lo: f64,
    hi: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DomainKind {
    LogUniform,
    Uniform,
    IntUniform,
}

impl Serialize for SearchSpace {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let records: Vec<DimensionRecord> = self
            .dims
            .iter()
            .map(|(name, d)| {
                let (kind, lo, hi) = match *d {
                    ParamDomain::LogUniform { lo, hi } => (DomainKind::LogUniform, lo, hi),
                    ParamDomain::Uniform { lo, hi } => (DomainKind::Uniform, lo, hi),
                    ParamDomain::IntUniform { lo, hi } => {
                        (DomainKind::IntUniform, lo as f64, hi as f64)
                    }
                };
                DimensionRecord {
                    name: name.clone(),
                    kind,
                    lo,
                    hi,
                }
            })
            .collect();
        records.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SearchSpace {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let records = Vec::<DimensionRecord>::deserialize(deserializer)?;
        let mut space = SearchSpace::new();
        for r in records {
            let domain = match r.kind {
                DomainKind::LogUniform => ParamDomain::LogUniform { lo: r.lo, hi: r.hi },
                DomainKind::Uniform => ParamDomain::Uniform { lo: r.lo, hi: r.hi },
                DomainKind::IntUniform => {
                    if r.lo.fract() != 0.0 || r.hi.fract() != 0.0 {
                        return Err(D::Error::custom(format!(
                            "integer bounds expected for `{}`",
                            r.name
                        )));
                    }
                    ParamDomain::IntUniform {
                        lo: r.lo as i64,
                        hi: r.hi as i64,
                    }
                }
            };
            space.push(r.name, domain).map_err(D::Error::custom)?;
        }
        Ok(space)
    }
}
