use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate bisector: view and illumination directions are opposite")]
    DegenerateBisector,

    #[error("degenerate line bundle: {0}")]
    DegenerateBundle(String),

    #[error("scene invariant violated: {invariant}")]
    InvalidScene { invariant: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("pattern coordinate ({u}, {v}) outside the screen")]
    PatternOutOfRange { u: f64, v: f64 },

    #[error("invalid pattern: {0}")]
    InvalidPattern(String),

    #[error("no wavelet ridge: only {passing} of {total} pixels pass the quality threshold")]
    NoRidge { passing: usize, total: usize },

    #[error("phase-shift decode expected {expected} frames, got {got}")]
    ShiftCountMismatch { expected: usize, got: usize },

    #[error("unwrap seed pixel ({0}, {1}) is not valid")]
    InvalidSeed(usize, usize),

    #[error("anchor pixel ({0}, {1}) is not valid in both phase maps")]
    InvalidAnchor(usize, usize),

    #[error("reconstructed normal field has only {0} samples (need at least 100)")]
    EmptyField(usize),

    #[error("need at least {needed} lines, got {got}")]
    InsufficientLines { needed: usize, got: usize },

    #[error("second center not found: only {remaining} lines left after removing the first cluster")]
    SecondCenterNotFound { remaining: usize },

    #[error("cannot tell cornea from sclera: mean radii {0:.3} mm and {1:.3} mm differ by less than 10%")]
    AmbiguousRadii(f64, f64),

    #[error("cornea and sclera centers only {0:.4} mm apart")]
    CentersTooClose(f64),

    #[error("unreliable loss: {n_valid} jointly valid pixels (need {n_min})")]
    UnreliableLoss { n_valid: usize, n_min: usize },

    #[error("no accepted descent step in the first {0} proposals")]
    NoDescent(usize),

    #[error("correspondence map has no valid pixels")]
    EmptyMap,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
