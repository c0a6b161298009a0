//! Process exit codes and the error type that carries them.

use std::fmt;

pub const OK: i32 = 0;
pub const CONFIG: i32 = 2;
pub const DATA: i32 = 3;
pub const NUMERIC: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(e: impl fmt::Display) -> Self {
        CliError {
            code: CONFIG,
            message: e.to_string(),
        }
    }

    pub fn data(e: impl fmt::Display) -> Self {
        CliError {
            code: DATA,
            message: e.to_string(),
        }
    }

    pub fn numeric(e: impl fmt::Display) -> Self {
        CliError {
            code: NUMERIC,
            message: e.to_string(),
        }
    }

    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

// Invalid arguments reaching the libraries come from settings that do not
// fit together or do not fit the data, which the user fixes in the config.
impl From<geomae_core::Error> for CliError {
    fn from(e: geomae_core::Error) -> Self {
        use geomae_core::Error as E;
        match e {
            E::InvalidArgument(_) => CliError::config(e),
            E::Numeric(_) => CliError::numeric(e),
            E::Format { .. } | E::Io { .. } => CliError::data(e),
        }
    }
}

impl From<geomae_sampler::Error> for CliError {
    fn from(e: geomae_sampler::Error) -> Self {
        use geomae_sampler::Error as E;
        match e {
            E::InvalidArgument(_) => CliError::config(e),
            E::Core(inner) => inner.into(),
            E::Row { .. } | E::Format { .. } | E::Io { .. } => CliError::data(e),
        }
    }
}

impl From<geomae_bench::Error> for CliError {
    fn from(e: geomae_bench::Error) -> Self {
        use geomae_bench::Error as E;
        match e {
            E::InvalidArgument(_) => CliError::config(e),
            E::Format { .. } | E::Io { .. } => CliError::data(e),
        }
    }
}
