use diffdf_core::ErrorClass;

/// Command failure, classified for the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<diffdf_core::Error> for CliError {
    fn from(e: diffdf_core::Error) -> Self {
        match e.class() {
            ErrorClass::Config => CliError::Config(e.to_string()),
            ErrorClass::Data => CliError::Data(e.to_string()),
            ErrorClass::Runtime => CliError::Runtime(e.to_string()),
        }
    }
}
