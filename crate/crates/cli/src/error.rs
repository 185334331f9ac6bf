use std::fmt;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Unparseable or inconsistent configuration: exit 2.
    Config(String),
    /// Training or evaluation produced non-finite or diverging values: exit 3.
    Numeric(String),
    /// Filesystem trouble: exit 1.
    Io(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<wflow::Error> for CliError {
    fn from(e: wflow::Error) -> Self {
        use wflow::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidArgument(_)
            | E::Dimension { .. }
            | E::UnknownPreset(_)
            | E::Checkpoint(_)
            | E::CheckpointVersion { .. }
            | E::Checksum { .. } => CliError::Config(msg),
            E::Num(_) | E::Integration { .. } | E::Divergence { .. } | E::NonFinite(_) => CliError::Numeric(msg),
            E::Io(_) | E::Csv(_) => CliError::Io(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
