use std::path::PathBuf;

use nball_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("residual check failed: {0}")]
    Residual(String),
}

impl CliError {
    /// 2 for bad input, 3 for numerical failure, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Residual(_) => 3,
            CliError::Core(e) => match e {
                CoreError::LinearSolveFailure(_) | CoreError::InsufficientConvergenceRadius(_) => 3,
                _ => 2,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(CoreError::EvennessViolation { index: 1, value: 0.1 }).exit_code(), 2);
        assert_eq!(CliError::Core(CoreError::NonPositiveDiffusion(0.0)).exit_code(), 2);
        assert_eq!(CliError::Core(CoreError::LinearSolveFailure("x".into())).exit_code(), 3);
        assert_eq!(CliError::Residual("x".into()).exit_code(), 3);
        let io = std::io::Error::other("x");
        assert_eq!(CliError::Io { path: "a".into(), source: io }.exit_code(), 1);
    }
}
