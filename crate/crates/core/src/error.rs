use alloc::string::String;
use alloc::vec::Vec;

use crate::labels::LabelViolation;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("event at t={t} lies outside the voxel window [{start}, {end})")]
    EventOutsideWindow { t: u64, start: u64, end: u64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("class {0} has no queued prototypes")]
    AbsentClass(u8),

    #[error("non-finite loss `{loss}` at step {step}")]
    NonFiniteLoss { step: u64, loss: &'static str },

    #[error("metric undefined: no class has ground-truth or predicted support")]
    UndefinedMetric,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label set violates {} constraint(s)", .0.len())]
    InvalidLabels(Vec<LabelViolation>),

    #[error("training observer failed: {0}")]
    Observer(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
