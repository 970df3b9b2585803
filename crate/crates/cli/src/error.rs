use std::fmt;

use crate::config::Source;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_COLLISION: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn collision(message: impl Into<String>) -> Self {
        Self { code: EXIT_COLLISION, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: EXIT_IO, message: message.into() }
    }

    /// Maps a library error to an exit code. Errors that name a config key
    /// are located in `source`, within `section` when given.
    pub fn from_core(err: sdg::Error, source: &Source, section: Option<&str>) -> Self {
        use sdg::Error as E;
        let message = err.to_string();
        match err {
            E::Numeric(_) | E::Dimension { .. } => Self { code: EXIT_NUMERIC, message },
            E::Parameter { name, reason } => Self::config(source.locate(section, name, &format!("{name}: {reason}"))),
            E::Config(msg) => {
                let key = msg.split(':').next().unwrap_or("").split('/').next().unwrap_or("");
                Self::config(source.locate(section, key.trim(), &msg))
            }
            E::Sampling(_) | E::InsufficientDomains { .. } | E::InsufficientSamples { .. } => {
                Self::config(format!("{}: {message}", source.path.display()))
            }
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}
