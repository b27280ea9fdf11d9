use thiserror::Error;

/// Errors raised by the volume, geometry and corruption routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid volume dims {0:?}: every axis must be >= 1")]
    InvalidDims([usize; 3]),
    #[error("invalid spacing {0:?}: every component must be > 0")]
    InvalidSpacing([f32; 3]),
    #[error("data length {got} does not match dims product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("label {label} out of range for class_count {class_count}")]
    LabelOutOfRange { label: u8, class_count: u16 },
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("no background reference")]
    NoBackground,
    #[error("seed {0:?} outside dims {1:?}")]
    SeedOutOfBounds([usize; 3], [usize; 3]),
    #[error("negative radius {0}")]
    NegativeRadius(f64),

    #[error("bad magic")]
    BadMagic,
    #[error("truncated header")]
    TruncatedHeader,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("dim/payload mismatch: expected {expected} bytes, found {found}")]
    PayloadMismatch { expected: usize, found: usize },

    #[error("spec does not fit: {0}")]
    SpecDoesNotFit(String),
    #[error("invalid tree spec: {0}")]
    InvalidSpec(String),

    #[error("branch not breakable: {0}")]
    BranchNotBreakable(String),
    #[error("branch id {0} out of range")]
    UnknownBranch(usize),
    #[error("no breakable branch")]
    NoBreakableBranch,

    #[error("corrupted foreground is not contained in the complete tree")]
    ContainmentViolated,
    #[error("invalid weak-supervision inputs: {0}")]
    InvalidAccuracyInputs(String),

    #[error("empty foreground")]
    EmptyForeground,
    #[error("need at least {k} reference points, found {n}")]
    TooFewReferences { k: usize, n: usize },

    #[error("no disconnection available")]
    NoDisconnection,
    #[error("invalid sampling parameter: {0}")]
    InvalidSampling(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
