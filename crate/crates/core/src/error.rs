use alloc::string::String;

/// Error type shared by every module in the crate.
///
/// The variants map onto the error classes the CLI reports as distinct exit
/// codes: configuration, validation (bad arguments, bad actions, bad state),
/// numeric failures, and search-guard refusals.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// A step was attempted on a node the action mask excludes.
    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or shape mismatches inside numeric kernels.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An exhaustive search refused to run because its size guard tripped.
    #[error("guard refusal: {0}")]
    Guard(String),
}
