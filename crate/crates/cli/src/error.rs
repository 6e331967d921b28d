use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] convsynth::Error),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error("png export: {0}")]
    Image(#[from] image::ImageError),
}

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(convsynth::Error::InvalidArgument(_) | convsynth::Error::DimensionMismatch(_)) => EXIT_CONFIG,
            _ => EXIT_OTHER,
        }
    }
}

pub fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn io_context(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

pub type CliResult<T> = Result<T, CliError>;
