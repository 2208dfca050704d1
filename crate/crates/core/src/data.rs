//! Datasets, synthetic distribution-shift generators and the JSON Lines
//! dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("invalid generator setting: {0}")]
    InvalidGenerator(String),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, DataError> {
        if values.len() != rows * cols {
            return Err(DataError::Inconsistent(format!(
                "{rows}x{cols} matrix given {} values",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact on an empty slice with cols == 0 would panic
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Per-column population variance.
    pub fn column_variance(&self) -> Vec<f64> {
        let n = self.rows as f64;
        (0..self.cols)
            .map(|j| {
                let mean = (0..self.rows).map(|i| self.get(i, j)).sum::<f64>() / n;
                (0..self.rows)
                    .map(|i| (self.get(i, j) - mean).powi(2))
                    .sum::<f64>()
                    / n
            })
            .collect()
    }
}

/// Feature matrix with integer labels and optional group tags.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    features: Matrix,
    labels: Vec<usize>,
    groups: Option<Vec<usize>>,
    num_classes: usize,
}

impl LabeledDataset {
    /// The class count is inferred as `max label + 1`.
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        groups: Option<Vec<usize>>,
    ) -> Result<Self, DataError> {
        let c = labels.iter().max().map_or(0, |m| m + 1);
        Self::with_classes(name, features, labels, groups, c)
    }

    /// Like [`LabeledDataset::new`] with an explicit label space of `num_classes`.
    pub fn with_classes(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        groups: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if labels.len() != features.rows() {
            return Err(DataError::Inconsistent(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(g) = &groups {
            if g.len() != labels.len() {
                return Err(DataError::Inconsistent(format!(
                    "{} group tags for {} rows",
                    g.len(),
                    labels.len()
                )));
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Inconsistent(format!(
                "label {y} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            groups,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> Option<&[usize]> {
        self.groups.as_deref()
    }

    pub fn num_groups(&self) -> usize {
        self.groups
            .as_ref()
            .and_then(|g| g.iter().max())
            .map_or(0, |m| m + 1)
    }

    /// Rows at `indices`, in that order, keeping the label space.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let d = self.dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        LabeledDataset {
            name: self.name.clone(),
            features: Matrix {
                rows: indices.len(),
                cols: d,
                values,
            },
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: self
                .groups
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` rows (all rows if `n` exceeds the size).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Knobs of one shifted distribution of the spurious-blobs family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// Rotation of the core block (radians), applied in consecutive core planes.
    #[serde(default)]
    pub rotation: f64,
    /// Standard deviation of the per-feature Gaussian noise.
    #[serde(default = "one")]
    pub noise: f64,
    /// Probability that the spurious attribute is replaced by a different class.
    #[serde(default)]
    pub flip: f64,
    /// Class-prior logits; empty means uniform.
    #[serde(default)]
    pub prior_tilt: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl ShiftSpec {
    pub fn new(rotation: f64, noise: f64, flip: f64) -> Self {
        Self {
            rotation,
            noise,
            flip,
            prior_tilt: Vec::new(),
            seed: 0,
        }
    }

    fn validate(&self, classes: usize) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.flip) {
            return Err(DataError::InvalidGenerator(format!(
                "flip {} outside [0, 1]",
                self.flip
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(DataError::InvalidGenerator(format!(
                "noise {} must be nonnegative",
                self.noise
            )));
        }
        if !self.rotation.is_finite() || self.prior_tilt.iter().any(|t| !t.is_finite()) {
            return Err(DataError::InvalidGenerator(
                "non-finite shift setting".into(),
            ));
        }
        if !self.prior_tilt.is_empty() && self.prior_tilt.len() != classes {
            return Err(DataError::InvalidGenerator(format!(
                "prior tilt has {} entries for {classes} classes",
                self.prior_tilt.len()
            )));
        }
        Ok(())
    }
}

/// A named split drawn from a shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub size: usize,
    pub shift: ShiftSpec,
}

/// Class-conditional blobs on `classes` core dimensions plus `dim - classes`
/// spurious dimensions whose mean encodes a label-correlated attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    /// Distance of each core class mean from the origin, in noise units.
    pub margin: f64,
    /// Norm of each spurious attribute mean.
    pub spurious_strength: f64,
    /// Source distribution of the pretrained model.
    pub pretrain: SplitSpec,
    /// In-distribution shift; train, ID validation and ID test share it.
    pub id: ShiftSpec,
    pub train_size: usize,
    pub id_val_size: usize,
    pub id_test_size: usize,
    pub ood_val: SplitSpec,
    pub tests: Vec<SplitSpec>,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self::benchmark(0)
    }
}

impl BlobsConfig {
    /// The benchmark family used by the sampler and validation-choice studies.
    pub fn benchmark(seed: u64) -> Self {
        let classes = 3;
        Self {
            classes,
            dim: 8,
            margin: 2.0,
            spurious_strength: 3.0,
            pretrain: SplitSpec {
                name: "pretrain".into(),
                size: 2000,
                shift: ShiftSpec::new(0.0, 1.0, 2.0 / 3.0),
            },
            id: ShiftSpec::new(0.6, 1.0, 0.0),
            train_size: 1000,
            id_val_size: 500,
            id_test_size: 1000,
            ood_val: SplitSpec {
                name: "ood_val".into(),
                size: 1000,
                shift: ShiftSpec::new(0.6, 1.2, 0.8),
            },
            tests: vec![
                SplitSpec {
                    name: "ood_flip".into(),
                    size: 1000,
                    shift: ShiftSpec::new(0.6, 1.0, 0.9),
                },
                SplitSpec {
                    name: "ood_noise".into(),
                    size: 1000,
                    shift: ShiftSpec::new(0.75, 1.5, 0.7),
                },
            ],
            seed,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::InvalidGenerator(
                "need at least two classes".into(),
            ));
        }
        if self.dim < self.classes + 2 {
            return Err(DataError::InvalidGenerator(format!(
                "dimension {} must be at least classes + 2 = {}",
                self.dim,
                self.classes + 2
            )));
        }
        for s in [&self.pretrain.shift, &self.id, &self.ood_val.shift]
            .into_iter()
            .chain(self.tests.iter().map(|t| &t.shift))
        {
            s.validate(self.classes)?;
        }
        Ok(())
    }
}

/// All splits of one spurious-blobs draw.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobsFamily {
    pub pretrain: LabeledDataset,
    pub train: LabeledDataset,
    pub id_val: LabeledDataset,
    pub id_test: LabeledDataset,
    pub ood_val: LabeledDataset,
    pub tests: Vec<LabeledDataset>,
}

const TAG_PROJECTION: u64 = 0x5150;

pub fn gen_spurious_blobs(cfg: &BlobsConfig) -> Result<BlobsFamily, DataError> {
    cfg.validate()?;
    let spur_dim = cfg.dim - cfg.classes;
    let mut prng = rng::stream(&[cfg.seed, TAG_PROJECTION]);
    let mut attribute_means = Vec::with_capacity(cfg.classes);
    for _ in 0..cfg.classes {
        let v: Vec<f64> = (0..spur_dim).map(|_| prng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        attribute_means.push(
            v.into_iter()
                .map(|x| cfg.spurious_strength * x / norm)
                .collect::<Vec<f64>>(),
        );
    }
    let draw = |name: &str, size: usize, shift: &ShiftSpec, tag: u64| {
        sample_blobs(cfg, &attribute_means, name, size, shift, tag)
    };
    Ok(BlobsFamily {
        pretrain: draw(
            &cfg.pretrain.name,
            cfg.pretrain.size,
            &cfg.pretrain.shift,
            1,
        ),
        train: draw("train", cfg.train_size, &cfg.id, 2),
        id_val: draw("id_val", cfg.id_val_size, &cfg.id, 3),
        id_test: draw("id_test", cfg.id_test_size, &cfg.id, 4),
        ood_val: draw(&cfg.ood_val.name, cfg.ood_val.size, &cfg.ood_val.shift, 5),
        tests: cfg
            .tests
            .iter()
            .enumerate()
            .map(|(k, t)| draw(&t.name, t.size, &t.shift, 100 + k as u64))
            .collect(),
    })
}

fn sample_blobs(
    cfg: &BlobsConfig,
    attribute_means: &[Vec<f64>],
    name: &str,
    size: usize,
    shift: &ShiftSpec,
    tag: u64,
) -> LabeledDataset {
    let c = cfg.classes;
    let mut r = rng::stream(&[cfg.seed, tag, shift.seed]);
    let prior: Vec<f64> = if shift.prior_tilt.is_empty() {
        vec![1.0 / c as f64; c]
    } else {
        let m = shift
            .prior_tilt
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = shift.prior_tilt.iter().map(|t| (t - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };
    let (cos, sin) = (shift.rotation.cos(), shift.rotation.sin());
    let mut values = Vec::with_capacity(size * cfg.dim);
    let mut labels = Vec::with_capacity(size);
    let mut groups = Vec::with_capacity(size);
    for _ in 0..size {
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut y = c - 1;
        for (k, p) in prior.iter().enumerate() {
            acc += p;
            if u < acc {
                y = k;
                break;
            }
        }
        let a = if r.random::<f64>() < shift.flip {
            let k = r.random_range(0..c - 1);
            if k >= y {
                k + 1
            } else {
                k
            }
        } else {
            y
        };
        let mut core = vec![0.0; c];
        core[y] = cfg.margin;
        for v in core.iter_mut() {
            *v += shift.noise * r.sample::<f64, _>(StandardNormal);
        }
        // rotate in planes (0,1), (1,2), ... of the core block
        for j in 0..c - 1 {
            let (p, q) = (core[j], core[j + 1]);
            core[j] = cos * p - sin * q;
            core[j + 1] = sin * p + cos * q;
        }
        values.extend_from_slice(&core);
        for m in &attribute_means[a] {
            values.push(m + shift.noise * r.sample::<f64, _>(StandardNormal));
        }
        labels.push(y);
        groups.push(y * c + a);
    }
    let features = Matrix::new(size, cfg.dim, values).expect("sized above");
    LabeledDataset::with_classes(name, features, labels, Some(groups), c).expect("labels in range")
}

/// Variance of the didactic training distribution in dimension `i`.
pub fn toy_train_variance(i: usize) -> f64 {
    if i < 4 {
        1e-3
    } else {
        1.0
    }
}

/// Variance of the didactic validation distribution in dimension `i`.
pub fn toy_val_variance(i: usize) -> f64 {
    match i {
        0..=2 | 4 => 1e-3,
        _ => 1.0,
    }
}

/// Variance of the optional third shift (distinct from train and validation).
pub fn toy_distinct_variance(i: usize) -> f64 {
    match i {
        0..=2 => 1e-3,
        _ => 1.0,
    }
}

/// Unlabeled splits of the didactic Gaussian experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySplits {
    pub train: Matrix,
    pub val: Matrix,
    pub test: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for ToySizes {
    fn default() -> Self {
        Self {
            train: 500,
            val: 100,
            test: 1000,
        }
    }
}

/// Zero-mean diagonal Gaussians; the test split reuses the validation
/// distribution unless `distinct_test` selects the third shift.
pub fn gen_gaussian_toy(
    dim: usize,
    sizes: ToySizes,
    seed: u64,
    distinct_test: bool,
) -> Result<ToySplits, DataError> {
    if dim < 6 {
        return Err(DataError::InvalidGenerator(format!(
            "didactic data needs d >= 6, got {dim}"
        )));
    }
    let draw = |n: usize, var: fn(usize) -> f64, tag: u64| {
        let mut r = rng::stream(&[seed, tag]);
        let std: Vec<f64> = (0..dim).map(|i| var(i).sqrt()).collect();
        let mut values = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for s in &std {
                values.push(s * r.sample::<f64, _>(StandardNormal));
            }
        }
        Matrix::new(n, dim, values).expect("sized above")
    };
    let test_var: fn(usize) -> f64 = if distinct_test {
        toy_distinct_variance
    } else {
        toy_val_variance
    };
    Ok(ToySplits {
        train: draw(sizes.train, toy_train_variance, 1),
        val: draw(sizes.val, toy_val_variance, 2),
        test: draw(sizes.test, test_var, 3),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    name: String,
    d: usize,
    #[serde(rename = "C")]
    classes: usize,
    n: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowRecord {
    x: Vec<f64>,
    y: usize,
    #[serde(default)]
    g: Option<usize>,
}

/// Formats a float with 17 significant digits (exact round trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `ds` as JSON Lines: a header line, then one `{x, y, g?}` per row.
pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = Header {
        name: ds.name.clone(),
        d: ds.dim(),
        classes: ds.num_classes(),
        n: ds.len(),
    };
    let header = serde_json::to_string(&header).expect("header serializes");
    writeln!(w, "{header}").map_err(io)?;
    for i in 0..ds.len() {
        let xs: Vec<String> = ds.row(i).iter().map(|v| fmt_f64(*v)).collect();
        write!(w, "{{\"x\":[{}],\"y\":{}", xs.join(","), ds.labels[i]).map_err(io)?;
        if let Some(g) = &ds.groups {
            write!(w, ",\"g\":{}", g[i]).map_err(io)?;
        }
        writeln!(w, "}}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fmt = |line: usize, message: String| DataError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header_line = match lines.next() {
        Some(l) => l.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?,
        None => return Err(fmt(1, "missing header line".into())),
    };
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| fmt(1, format!("bad header: {e}")))?;
    let mut values = Vec::with_capacity(header.n * header.d);
    let mut labels = Vec::with_capacity(header.n);
    let mut groups: Vec<usize> = Vec::new();
    let mut has_groups = None;
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let rec: RowRecord = serde_json::from_str(&line).map_err(|e| fmt(lineno, e.to_string()))?;
        if rec.x.len() != header.d {
            return Err(fmt(
                lineno,
                format!("expected {} features, found {}", header.d, rec.x.len()),
            ));
        }
        if rec.y >= header.classes {
            return Err(fmt(
                lineno,
                format!("label {} outside {} classes", rec.y, header.classes),
            ));
        }
        match (has_groups, rec.g) {
            (None, g) => has_groups = Some(g.is_some()),
            (Some(true), None) | (Some(false), Some(_)) => {
                return Err(fmt(lineno, "group tags present on some rows only".into()))
            }
            _ => {}
        }
        values.extend(rec.x);
        labels.push(rec.y);
        if let Some(g) = rec.g {
            groups.push(g);
        }
    }
    if labels.len() != header.n {
        return Err(fmt(
            labels.len() + 2,
            format!(
                "header promises {} rows but file ends after {}",
                header.n,
                labels.len()
            ),
        ));
    }
    let features = Matrix::new(header.n, header.d, values)?;
    let groups = has_groups.unwrap_or(false).then_some(groups);
    LabeledDataset::with_classes(header.name, features, labels, groups, header.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_variance_patterns() {
        let t = gen_gaussian_toy(
            10,
            ToySizes {
                train: 10_000,
                val: 10_000,
                test: 10,
            },
            3,
            false,
        )
        .unwrap();
        let tv = t.train.column_variance();
        for v in &tv[..4] {
            assert!(*v < 0.01);
        }
        let vv = t.val.column_variance();
        assert!((vv[3] - 1.0).abs() < 0.15);
        assert!(vv[4] < 0.01);
        assert!(gen_gaussian_toy(5, ToySizes::default(), 0, false).is_err());
    }

    #[test]
    fn toy_is_deterministic_and_seed_sensitive() {
        let a = gen_gaussian_toy(6, ToySizes::default(), 9, false).unwrap();
        let b = gen_gaussian_toy(6, ToySizes::default(), 9, false).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.train.values().iter().zip(b.train.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c = gen_gaussian_toy(6, ToySizes::default(), 10, false).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn different_seeds_are_uncorrelated() {
        let sizes = ToySizes {
            train: 10_000,
            val: 1,
            test: 1,
        };
        let a = gen_gaussian_toy(6, sizes, 1, false).unwrap();
        let b = gen_gaussian_toy(6, sizes, 2, false).unwrap();
        let (x, y) = (a.train.values(), b.train.values());
        // column 5 has unit variance in both
        let xs: Vec<f64> = (0..10_000).map(|i| x[i * 6 + 5]).collect();
        let ys: Vec<f64> = (0..10_000).map(|i| y[i * 6 + 5]).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 1e4, ys.iter().sum::<f64>() / 1e4);
        let cov: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|b| (b - my).powi(2)).sum();
        assert!((cov / (vx * vy).sqrt()).abs() < 0.05);
    }

    #[test]
    fn blobs_shape_and_groups() {
        let cfg = BlobsConfig::benchmark(4);
        let fam = gen_spurious_blobs(&cfg).unwrap();
        assert_eq!(fam, gen_spurious_blobs(&cfg).unwrap());
        assert_eq!(fam.train.dim(), 8);
        assert_eq!(fam.train.num_classes(), 3);
        assert!(fam.ood_val.len() <= 1000);
        // no flips in the ID splits: attribute equals label
        let g = fam.train.groups().unwrap();
        for (y, gi) in fam.train.labels().iter().zip(g) {
            assert_eq!(*gi, y * 3 + y);
        }
        let flipped = fam.tests[0]
            .labels()
            .iter()
            .zip(fam.tests[0].groups().unwrap())
            .filter(|(y, g)| **g != **y * 3 + **y)
            .count();
        let rate = flipped as f64 / fam.tests[0].len() as f64;
        assert!((rate - 0.9).abs() < 0.05, "flip rate {rate}");
    }

    #[test]
    fn blobs_reject_bad_dimensions() {
        let mut cfg = BlobsConfig::benchmark(0);
        cfg.dim = 4;
        assert!(gen_spurious_blobs(&cfg).is_err());
        let mut cfg = BlobsConfig::benchmark(0);
        cfg.classes = 1;
        assert!(gen_spurious_blobs(&cfg).is_err());
        let mut cfg = BlobsConfig::benchmark(0);
        cfg.id.flip = 1.5;
        assert!(gen_spurious_blobs(&cfg).is_err());
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let fam = gen_spurious_blobs(&BlobsConfig::benchmark(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        save_dataset(&fam.train, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.labels(), fam.train.labels());
        assert_eq!(back.groups(), fam.train.groups());
        for (a, b) in back
            .features()
            .values()
            .iter()
            .zip(fam.train.features().values())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, fam.train);
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_dataset(Path::new("/nonexistent/data.jsonl")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/data.jsonl"));
    }

    #[test]
    fn truncated_file_names_line() {
        let fam = gen_spurious_blobs(&BlobsConfig::benchmark(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        save_dataset(&fam.id_val.head(5), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // cut the file in the middle of the fourth data row (line 5)
        let cut: usize = text.lines().take(4).map(|l| l.len() + 1).sum::<usize>() + 20;
        std::fs::write(&path, &text[..cut]).unwrap();
        match load_dataset(&path).unwrap_err() {
            DataError::Format { line, .. } => assert_eq!(line, 5),
            e => panic!("unexpected {e}"),
        }
        // cut at a line boundary: row count check
        let cut: usize = text.lines().take(3).map(|l| l.len() + 1).sum();
        std::fs::write(&path, &text[..cut]).unwrap();
        match load_dataset(&path).unwrap_err() {
            DataError::Format { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("promises 5 rows"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn formatting_uses_17_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.5), "-2.5000000000000000e0");
    }
}
