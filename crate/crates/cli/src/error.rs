use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad manifest, bad flags, unreadable or malformed input. Exit code 1.
    #[error("{0}")]
    Validation(String),

    /// Anything that goes wrong while doing the work. Exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// Classifies a core error raised while handling `context`.
    pub fn from_core(context: &str, err: adaptqa_core::Error) -> Self {
        use adaptqa_core::Error as E;
        let message = format!("{context}: {err}");
        match err {
            E::Config(_) | E::Dataset(_) | E::Parse { .. } => CliError::Validation(message),
            _ => CliError::Runtime(message),
        }
    }

    pub fn io(context: impl std::fmt::Display, err: std::io::Error) -> Self {
        CliError::Runtime(format!("{context}: {err}"))
    }
}
