use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_DIVERGENCE: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Core(#[from] protokd::Error),

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use protokd::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidArgument(_) => EXIT_CONFIG,
                E::Data(_) | E::Decode { .. } | E::Checkpoint(_) | E::Io(_) | E::Json(_) => {
                    EXIT_DATA
                }
                E::Divergence { .. } | E::NonFinite { .. } => EXIT_DIVERGENCE,
                _ => EXIT_OTHER,
            },
            CliError::Output { .. } => EXIT_OTHER,
        }
    }
}
