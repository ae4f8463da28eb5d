use std::fmt::Display;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid or inconsistent configuration, including unusable inputs.
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Output { .. } => 1,
        }
    }

    pub fn output(path: &Path, err: impl Display) -> Self {
        CliError::Output {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn input(path: &Path, err: impl Display) -> Self {
        CliError::Config(format!("{}: {err}", path.display()))
    }
}

macro_rules! numeric_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Numeric(e.to_string())
            }
        })*
    };
}

numeric_from!(
    riskagg::panel::PanelError,
    riskagg::pca::PcaError,
    riskagg::cluster::ClusterError,
    riskagg::nnet::NnetError,
    riskagg::factors::FactorError,
    riskagg::stress::StressError
);
