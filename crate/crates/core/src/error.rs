use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("matrix is not symmetric: max |m_ij - m_ji| = {0:e}")]
    NotSymmetric(f64),
    #[error("matrix is rank deficient (smallest eigenvalue {0:e})")]
    RankDeficient(f64),
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("non-finite activation in encoder layer {layer}")]
    NonFiniteLayer { layer: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("missing text target for sample `{0}`")]
    MissingTarget(String),
    #[error("class {class} has no samples left after subsetting")]
    EmptyClass { class: usize },
    #[error("classes present on one side only: {0:?}")]
    ClassMismatch(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
