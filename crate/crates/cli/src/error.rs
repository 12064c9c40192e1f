use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, schema violations, or missing inputs.
    #[error("{0}")]
    Config(String),

    #[error("missing {what} at {}: {hint}", path.display())]
    MissingArtifact { what: &'static str, path: PathBuf, hint: &'static str },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] mogen_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingArtifact { .. } => 2,
            CliError::Io { .. } | CliError::Core(_) | CliError::Json(_) => 3,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}
