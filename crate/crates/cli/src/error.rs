use std::fmt;

/// Command failure, carrying its exit code class.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or arguments that contradict each other (exit 2).
    Usage(String),
    /// Invalid configuration or input data (exit 3).
    Validation(String),
    /// Failure while running: I/O, numerics (exit 4).
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
            CliError::Usage(m) | CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<mclab::Error> for CliError {
    fn from(e: mclab::Error) -> Self {
        use mclab::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_)
            | E::Parse { .. }
            | E::Integrity(_)
            | E::Validation(_)
            | E::Data(_)
            | E::Format(_)
            | E::Dimension { .. } => CliError::Validation(msg),
            E::DegenerateBatch(_) | E::Numeric(_) | E::UndefinedMetric(_) | E::Io(_) => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
