use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are invalid for an op. Carries the op name and the
    /// offending shapes so the message pinpoints the call site.
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { numel: usize },
    /// A loss component evaluated to NaN or infinity.
    NonFiniteLoss { component: &'static str, value: f64 },
    /// A gradient fed to the optimizer was NaN or infinite.
    NonFiniteGrad { param: String },
    /// A class label lies outside `[0, num_classes)`.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// Network builder got a spec it cannot realize.
    BadNetworkSpec { reason: String },
    /// Dataset construction or sampling failed.
    BadDataset { reason: String },
    /// Anything else with a fixed message.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected}, got {got:?}")
            }
            Error::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            Error::NonFiniteLoss { component, value } => {
                write!(f, "non-finite loss in {component}: {value}")
            }
            Error::NonFiniteGrad { param } => {
                write!(f, "non-finite gradient for parameter {param}")
            }
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Error::BadNetworkSpec { reason } => write!(f, "invalid network spec: {reason}"),
            Error::BadDataset { reason } => write!(f, "invalid dataset: {reason}"),
            Error::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
