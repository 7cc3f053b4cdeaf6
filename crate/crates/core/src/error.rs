use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("vector is not on the probability simplex (sum {sum}, min entry {min})")]
    NotOnSimplex { sum: f64, min: f64 },
    #[error("simplex vectors need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("stable and unstable predictions are saturated in opposite directions")]
    ConflictingCertainty,
    #[error("unnormalized product has no mass")]
    ZeroMass,
    #[error("prior must lie strictly inside (0, 1) entrywise")]
    DegeneratePrior,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("soft class mass of class {class} is degenerate ({mass})")]
    DegenerateClassMass { class: usize, mass: f64 },
    #[error("stable predictor is uninformative (margin {margin} <= {threshold})")]
    UninformativeStable { margin: f64, threshold: f64 },
    #[error("unstable learner failed: {0}")]
    LearnerFailure(String),
    #[error("temperature must be finite and positive, got {0}")]
    InvalidTemperature(f64),
    #[error("at least one bin is required")]
    NoBins,
    #[error("empty temperature grid")]
    EmptyGrid,
    #[error("gradient tape does not match the network it is replayed against")]
    StaleTape,
    #[error("split point {dim_s} is invalid for width {width}")]
    BadSplit { dim_s: usize, width: usize },
    #[error("environment {0} has no samples")]
    EmptyEnvironment(usize),
    #[error("need at least {needed} environments, got {got}")]
    TooFewEnvironments { needed: usize, got: usize },
    #[error("class {class} has {count} samples, need at least 2")]
    DegenerateClass { class: usize, count: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("generator {0} has no closed-form oracle")]
    UnsupportedGenerator(&'static str),
    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated IDX payload: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("unknown environment id {0}")]
    UnknownEnvironment(usize),
}
