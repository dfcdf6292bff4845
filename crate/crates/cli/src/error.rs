use std::fmt;

/// CLI failures, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or unknown config keys.
    Usage(String),
    /// A config or input that fails validation.
    Validation(String),
    /// Anything that goes wrong while running.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dmdp::Error> for CliError {
    fn from(e: dmdp::Error) -> Self {
        use dmdp::Error as E;
        match e {
            E::Config(_) | E::Validation(_) | E::Depth { .. } | E::Parse { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
