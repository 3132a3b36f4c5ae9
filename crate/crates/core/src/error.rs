use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("incompatible degrees ({0}, {1}, {2}) violate the triangle rule")]
    IncompatibleDegrees(u32, u32, u32),
    #[error("degree {0} exceeds the supported maximum {1}")]
    DegreeTooLarge(u32, u32),
    #[error("signature mismatch: expected dimension {expected}, got {actual}")]
    SignatureMismatch { expected: usize, actual: usize },
    #[error("direction is not a unit vector (norm {0})")]
    NonUnitDirection(f64),
    #[error("radius {r} outside the radial domain (0, {cutoff}]")]
    RadiusOutOfRange { r: f64, cutoff: f64 },
    #[error("cutoff {cutoff} violates the minimum-image bound {bound}")]
    MinimumImage { cutoff: f64, bound: f64 },
    #[error("candidate group is not closed: {0}")]
    GroupNotClosed(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("leaf {0} has no bound value")]
    UnboundLeaf(usize),
    #[error("backward called before forward")]
    NotEvaluated,
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, Error>;
