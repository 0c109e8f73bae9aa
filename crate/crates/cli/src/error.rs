use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or input files.
    #[error("{0}")]
    Config(String),
    /// Training produced a non-finite loss or parameters.
    #[error(transparent)]
    Diverged(aal_core::Error),
    #[error(transparent)]
    Runtime(aal_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    /// A check ran to completion and did not pass.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Runtime(_) | CliError::Io { .. } | CliError::Failed(_) => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<aal_core::Error> for CliError {
    fn from(e: aal_core::Error) -> Self {
        use aal_core::Error as E;
        match e {
            E::Diverged { .. } | E::NonFinite { .. } => CliError::Diverged(e),
            E::BadMagic { .. }
            | E::TruncatedPayload { .. }
            | E::CountMismatch { .. }
            | E::Malformed { .. }
            | E::CheckpointMagic
            | E::CheckpointVersion { .. }
            | E::Checksum { .. }
            | E::MissingSection(_)
            | E::Json(_)
            | E::EmptyDataset
            | E::LabelOutOfRange { .. }
            | E::InvalidArgument(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}
