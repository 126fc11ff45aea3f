use thiserror::Error;

/// Errors raised by the lab's numerical and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} is fully masked; softmax has no support")]
    FullyMaskedRow { row: usize },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("KL support violation at index {index}: p > 0 but q = 0")]
    SupportViolation { index: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("token {token} lies outside the carried sampling mask")]
    TokenOutsideMask { token: usize },

    #[error("malformed routing record: {0}")]
    MalformedRouting(String),

    #[error("ratio overflow at output {output}, token {token}")]
    RatioOverflow { output: usize, token: usize },

    #[error("divergence at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
