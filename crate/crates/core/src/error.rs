use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("grid: {0}")]
    Grid(String),

    #[error("quadrature did not converge on [{lo}, {hi}] (estimate {estimate})")]
    Quadrature { lo: f64, hi: f64, estimate: f64 },

    #[error("value {value} outside [0, {max}] for {what}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        max: f64,
    },

    #[error("non-finite value in state after step {step}")]
    NonFinite { step: usize },

    #[error("point ({a}, {s}, {t}) is not on the grid lattice")]
    OffLattice { a: f64, s: f64, t: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular pivot in tridiagonal solve at row {row}")]
    SingularPivot { row: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("config validation failed: {0}")]
    ConfigInvalid(String),

    #[error("config file {} not found", .0.display())]
    ConfigMissing(PathBuf),
}

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const USAGE: i32 = 2;
    pub const CONFIG_MISSING: i32 = 3;
    pub const CONFIG_PARSE: i32 = 4;
    pub const VALIDATION: i32 = 5;
    pub const NUMERICAL: i32 = 6;
    pub const IO: i32 = 7;
    /// A check ran to completion and reported failure.
    pub const CHECK_FAILED: i32 = 8;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigMissing(_) => exit::CONFIG_MISSING,
            Error::ConfigParse(_) => exit::CONFIG_PARSE,
            Error::ConfigInvalid(_)
            | Error::InvalidParameter { .. }
            | Error::Grid(_)
            | Error::OffLattice { .. }
            | Error::OutOfRange { .. } => exit::VALIDATION,
            Error::Quadrature { .. } | Error::NonFinite { .. } | Error::SingularPivot { .. } => exit::NUMERICAL,
            Error::Io { .. } | Error::Csv(_) | Error::Shape(_) => exit::IO,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
