use serde::{Deserialize, Serialize};

use super::ModelError;

/// Segment names of the linear head layout.
pub const PROTOTYPES: &str = "prototypes";
pub const BIAS: &str = "bias";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub name: String,
    pub len: usize,
}

/// Flat trainable parameters with a named segment layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawParamVector")]
pub struct ParamVector {
    layout: Vec<Segment>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParamVector {
    layout: Vec<Segment>,
    values: Vec<f64>,
}

impl TryFrom<RawParamVector> for ParamVector {
    type Error = ModelError;

    fn try_from(raw: RawParamVector) -> Result<Self, Self::Error> {
        ParamVector::new(raw.layout, raw.values)
    }
}

impl ParamVector {
    pub fn new(layout: Vec<Segment>, values: Vec<f64>) -> Result<Self, ModelError> {
        let total: usize = layout.iter().map(|s| s.len).sum();
        if total != values.len() {
            return Err(ModelError::LayoutMismatch {
                expected: total,
                got: values.len(),
            });
        }
        for (i, s) in layout.iter().enumerate() {
            if layout[..i].iter().any(|o| o.name == s.name) {
                return Err(ModelError::DuplicateSegment(s.name.clone()));
            }
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Vec<Segment>) -> Self {
        let n = layout.iter().map(|s| s.len).sum();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index range of a named segment.
    pub fn segment_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for s in &self.layout {
            if s.name == name {
                return Some(start..start + s.len);
            }
            start += s.len;
        }
        None
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segment_range(name).map(|r| &self.values[r])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// Copy of `self` carrying new values; panics if the length differs.
    pub fn with_values(&self, values: Vec<f64>) -> ParamVector {
        assert_eq!(
            values.len(),
            self.values.len(),
            "value length must match layout"
        );
        ParamVector {
            layout: self.layout.clone(),
            values,
        }
    }
}

/// Shape of a linear classifier `s = M x + b`; maps flat parameters to logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearHead {
    pub classes: usize,
    pub dim: usize,
}

impl LinearHead {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self { classes, dim }
    }

    pub fn layout(&self) -> Vec<Segment> {
        vec![
            Segment {
                name: PROTOTYPES.to_string(),
                len: self.classes * self.dim,
            },
            Segment {
                name: BIAS.to_string(),
                len: self.classes,
            },
        ]
    }

    pub fn param_count(&self) -> usize {
        self.classes * (self.dim + 1)
    }

    /// Row `c` of the prototype matrix.
    pub fn prototype<'a>(&self, params: &'a [f64], c: usize) -> &'a [f64] {
        &params[c * self.dim..(c + 1) * self.dim]
    }

    pub fn bias_offset(&self) -> usize {
        self.classes * self.dim
    }

    /// Writes `M x + b` into `out`.
    pub fn logits_into(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let b = self.bias_offset();
        for (c, o) in out.iter_mut().enumerate().take(self.classes) {
            let row = self.prototype(params, c);
            *o = row.iter().zip(x).map(|(m, xi)| m * xi).sum::<f64>() + params[b + c];
        }
    }

    /// Adds `d loss / d params` for one input given `d loss / d logits`.
    pub fn backprop(&self, x: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let b = self.bias_offset();
        for (c, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[c * self.dim..(c + 1) * self.dim];
            for (r, xi) in row.iter_mut().zip(x) {
                *r += g * xi;
            }
            grad[b + c] += g;
        }
    }
}

/// Linear prototype classifier with a frozen snapshot of its initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModel {
    pub params: ParamVector,
    init: ParamVector,
    num_classes: usize,
    feature_dim: usize,
}

impl LinearModel {
    /// Model whose current and initial parameters are both `params`.
    pub fn from_params(
        params: ParamVector,
        num_classes: usize,
        feature_dim: usize,
    ) -> Result<Self, ModelError> {
        let head = LinearHead::new(num_classes, feature_dim);
        if params.layout() != head.layout().as_slice() {
            return Err(ModelError::LayoutMismatch {
                expected: head.param_count(),
                got: params.len(),
            });
        }
        Ok(Self {
            init: params.clone(),
            params,
            num_classes,
            feature_dim,
        })
    }

    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        let head = LinearHead::new(num_classes, feature_dim);
        Self::from_params(ParamVector::zeros(head.layout()), num_classes, feature_dim)
            .expect("layout built from head")
    }

    /// Same head with new current parameters; the initial snapshot is kept.
    pub fn with_params(&self, params: ParamVector) -> Result<Self, ModelError> {
        if !params.same_layout(&self.init) {
            return Err(ModelError::LayoutMismatch {
                expected: self.init.len(),
                got: params.len(),
            });
        }
        Ok(Self {
            params,
            init: self.init.clone(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        })
    }

    /// Re-bases the model: current parameters become the frozen snapshot.
    pub fn frozen(&self) -> Self {
        Self {
            params: self.params.clone(),
            init: self.params.clone(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    pub fn init(&self) -> &ParamVector {
        &self.init
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn head(&self) -> LinearHead {
        LinearHead::new(self.num_classes, self.feature_dim)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.feature_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.num_classes];
        self.head().logits_into(self.params.values(), x, &mut out);
        Ok(out)
    }
}
