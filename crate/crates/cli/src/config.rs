//! TOML run configurations.

use std::path::Path;

use cpool_harness::TrainConfig;

use crate::error::{CliError, CliResult};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "CP_SEED";

/// Parses and validates a config document. Unknown keys are rejected.
pub fn parse(text: &str) -> CliResult<TrainConfig> {
    let config: TrainConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Reads `path`, applies a `CP_SEED` override, then validates.
pub fn load(path: &Path) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut config: TrainConfig = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

pub fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn to_toml(config: &TrainConfig) -> CliResult<String> {
    toml::to_string_pretty(config).map_err(CliError::runtime)
}
