use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {coord} on axis {axis} is outside [0, {extent})")]
    CoordinateOutOfRange { axis: usize, coord: usize, extent: usize },

    #[error("invalid lattice geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid couplings: {0}")]
    InvalidCouplings(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkerboard ordering needs an even extent, got L = {0}")]
    OddExtent(usize),

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("non-finite value produced by map component with label {label}")]
    NonFiniteComponent { label: usize },

    #[error("bracket expansion failed for label {label} after {doublings} doublings")]
    BracketFailure { label: usize, doublings: usize },

    #[error("training diverged at epoch {epoch} (seed {seed}): loss is not finite")]
    Diverged { epoch: usize, seed: u64 },

    #[error("acceptance rate {rate:.4} after burn-in is too low for independence sampling")]
    LowAcceptance { rate: f64 },

    #[error("requested {requested} samples but the chain only holds {available}")]
    InsufficientSamples { requested: usize, available: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
