//! Training, evaluation, gradient checking and ablation sweeps for the point
//! projection network, driven by a `key = value` run configuration.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod train;

pub use ablate::{run_ablate, variant_grid, AblationReport, AblationRow, Variant};
pub use config::{parse_config, DatasetKind, RunConfig};
pub use eval::{evaluate, run_eval};
pub use gradcheck::{run_gradcheck, run_gradcheck_in, run_gradcheck_with_fault, GradcheckReport, GroupCheck};
pub use train::{learning_rate, run_train, EpochRecord, TrainOutcome};

use thiserror::Error;

/// Failure classes with their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
            CliError::Internal(_) => "internal",
        }
    }

    /// `error code=<n> kind=<kind> message="<text>"` on one line.
    pub fn to_line(&self) -> String {
        format!("error code={} kind={} message={:?}", self.code(), self.kind(), self.to_string())
    }

    /// Treats any core error as a data problem (loading, parsing, checkpoints).
    pub fn data(e: pbp_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<pbp_core::Error> for CliError {
    fn from(e: pbp_core::Error) -> Self {
        use pbp_core::Error as E;
        match e {
            E::InvalidInput(_) => CliError::Config(e.to_string()),
            E::Dataset(_)
            | E::Parse { .. }
            | E::Io { .. }
            | E::Format(_)
            | E::ArchitectureMismatch(_)
            | E::LabelOutOfRange { .. } => CliError::Data(e.to_string()),
            E::Contract(_) | E::Shape(_) | E::Evaluation(_) => CliError::Internal(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
