use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use freestyle_core::ExperimentConfig;

/// Loads a TOML experiment config. Keys left out keep their defaults, so a
/// file may override a single field such as `train.epochs`.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing config {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let overrides: toml::Table = toml::from_str(text)?;
    let mut merged = toml::Table::try_from(ExperimentConfig::default())?;
    merge(&mut merged, overrides);
    let config: ExperimentConfig = toml::Value::Table(merged).try_into()?;
    config.validate()?;
    Ok(config)
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_override_single_fields() {
        let c = parse_config("[train]\nepochs = 3\n\n[backbone]\nwidth = 32\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.backbone.width, 32);
        assert_eq!(c.train.batch_size, ExperimentConfig::default().train.batch_size);
    }

    #[test]
    fn unknown_keys_and_invalid_values_are_rejected() {
        assert!(parse_config("[train]\nepoch = 3\n").is_err());
        assert!(parse_config("[train]\nepochs = 0\n").is_err());
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
    }
}
