//! Inner learners: a linear prototype classifier trained with AdamW under a
//! cosine schedule, and a diagonal Gaussian fitted by a variational objective.

pub mod gaussian;
pub mod linear;
pub mod optim;

pub use gaussian::{
    gaussian_nll_per_dim, kl_diag_gaussians, vb_fit, vb_fit_observed, DiagGaussian, MomentStats,
    VbSettings,
};
pub use linear::{LinearHead, LinearModel, ParamVector, Segment, BIAS, PROTOTYPES};
pub use optim::{cosine_lr, OptState, RateGroup};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter layout covers {expected} values but {got} were given")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("duplicate layout segment `{0}`")]
    DuplicateSegment(String),
    #[error("schedule needs at least one step")]
    ZeroTotalSteps,
    #[error("step {step} is past the end of a {total}-step schedule")]
    ScheduleExhausted { step: usize, total: usize },
    #[error("non-finite gradient at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("rate groups must tile the parameter vector with finite, nonnegative rates")]
    BadRateGroups,
    #[error("no data rows")]
    EmptyData,
    #[error("dimension weight {index} is negative or non-finite")]
    NegativeWeight { index: usize },
    #[error("variational objective became non-finite")]
    NonFiniteObjective,
}
