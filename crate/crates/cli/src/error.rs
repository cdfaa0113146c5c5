use std::path::Path;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dense2moe_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("provenance: expected a checkpoint from {expected}, found {found}")]
    Provenance { expected: String, found: String },
    #[error("verify: {0}")]
    Verify(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                dense2moe_core::Error::Shape { .. } => "shape",
                dense2moe_core::Error::NumericFault { .. } => "numeric_fault",
                dense2moe_core::Error::Config(_) => "config",
                dense2moe_core::Error::Contract(_) => "contract",
                dense2moe_core::Error::Query(_) => "query",
            },
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Provenance { .. } => "provenance",
            CliError::Verify(_) => "verify",
        }
    }

    /// The single-line JSON form written to stderr on failure.
    pub fn json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            message: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            expected_stage: Option<&'a str>,
        }
        let expected_stage = match self {
            CliError::Provenance { expected, .. } => Some(expected.as_str()),
            _ => None,
        };
        serde_json::to_string(&Line {
            error: self.kind(),
            message: self.to_string(),
            expected_stage,
        })
        .expect("error line serializes")
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Checkpoint(e.to_string())
    }
}
