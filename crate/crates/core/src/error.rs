use alloc::string::String;

/// Errors raised by the numerical core.
///
/// Every variant names the violated invariant so the CLI can report it
/// verbatim.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid pulse: {0}")]
    InvalidPulse(String),
    #[error("invalid detuning grid: {0}")]
    InvalidGrid(String),
    #[error("grid too coarse: spacing {spacing} exceeds resolution limit {limit}")]
    GridTooCoarse { spacing: f64, limit: f64 },
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("overlapping dips: target exceeds depth bound by {excess:.3}")]
    OverlappingDips { excess: f64 },
    #[error("bandwidth too small: need pulse duration >= {required_duration_s:.4e} s")]
    InsufficientBandwidth { required_duration_s: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("field singularity: distance {distance:.3e} m below epsilon {epsilon:.3e} m")]
    Singularity { distance: f64, epsilon: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no seed anchor on a valid pixel")]
    NoAnchor,
    #[error("shift {shift} Hz must lie strictly between 0 and the grating spacing {spacing} Hz")]
    InvalidShift { shift: f64, spacing: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;
