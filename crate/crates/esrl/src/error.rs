//! Crate-wide error type with process exit-code mapping for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid ratio: {0}")]
    InvalidRatio(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown token {token:?} at line {line}")]
    UnknownToken { token: String, line: usize },

    #[error("invalid dims: {0}")]
    InvalidDims(String),

    #[error("length overflow: sequence length {len} exceeds max_len {max_len}")]
    LengthOverflow { len: usize, max_len: usize },

    #[error("non-finite gradient in {0}")]
    NanGradient(String),

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("empty reference")]
    EmptyReference,

    #[error("empty sample set")]
    EmptySample,

    #[error("degenerate candidate set: MRT requires m >= 2, got {0}")]
    DegenerateSet(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 0 success, 1 config error, 2 data error, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidDims(_) | Error::DegenerateSet(_) => 1,
            Error::InvalidRange(_)
            | Error::InvalidRatio(_)
            | Error::Parse { .. }
            | Error::UnknownToken { .. }
            | Error::LengthOverflow { .. }
            | Error::EmptyReference
            | Error::EmptySample
            | Error::DimensionMismatch(_)
            | Error::Checkpoint(_)
            | Error::Io(_) => 2,
            Error::NanGradient(_) | Error::NumericalAbort(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_cli_contract() {
        assert_eq!(Error::InvalidConfig("x".into()).exit_code(), 1);
        assert_eq!(Error::DegenerateSet(1).exit_code(), 1);
        assert_eq!(Error::UnknownToken { token: "t".into(), line: 3 }.exit_code(), 2);
        assert_eq!(Error::Parse { line: 1, msg: "m".into() }.exit_code(), 2);
        assert_eq!(Error::NanGradient("w".into()).exit_code(), 3);
        assert_eq!(Error::NumericalAbort("loss".into()).exit_code(), 3);
    }
}
