use polar_core::PolarError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid TOML configuration: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("cannot serialize configuration: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Core(#[from] PolarError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
