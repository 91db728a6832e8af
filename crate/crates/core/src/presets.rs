//! Built-in dataset presets and layered configuration.
//!
//! A run's settings are built from three layers, later ones winning: a
//! built-in preset, an optional TOML config file with the same shape, and
//! command-line flags (applied by the caller on the returned values).

use std::path::Path;

use serde::Deserialize;

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

const BUILTIN: &[(&str, &str)] = &[
    ("ml1m-implicit", include_str!("../presets/ml1m-implicit.toml")),
    ("ml1m-explicit", include_str!("../presets/ml1m-explicit.toml")),
    ("amazon-implicit", include_str!("../presets/amazon-implicit.toml")),
    ("yahoo-implicit", include_str!("../presets/yahoo-implicit.toml")),
    ("yahoo-explicit", include_str!("../presets/yahoo-explicit.toml")),
    ("foursquare-implicit", include_str!("../presets/foursquare-implicit.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(name, _)| *name)
}

/// Resolved settings for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub description: Option<String>,
    pub split: Option<SplitSpec>,
    pub train: TrainConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Layer {
    description: Option<String>,
    split: Option<SplitSpec>,
    #[serde(default)]
    train: TrainConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::invalid(format!("{origin}: {e}")))
}

/// Text of a built-in preset.
pub fn builtin(name: &str) -> Result<&'static str> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| {
            let known: Vec<_> = names().collect();
            Error::invalid(format!("unknown preset {name:?} (known: {})", known.join(", ")))
        })
}

/// Layers a preset (if any) and a config file (if any) over the defaults.
pub fn resolve(preset: Option<&str>, config_text: Option<(&str, &Path)>) -> Result<Settings> {
    let mut table = toml::Table::new();
    if let Some(name) = preset {
        merge(&mut table, parse_table(builtin(name)?, &format!("preset {name}"))?);
    }
    if let Some((text, path)) = config_text {
        merge(&mut table, parse_table(text, &path.display().to_string())?);
    }
    let layer: Layer = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::invalid(format!("invalid configuration: {e}")))?;
    Ok(Settings {
        description: layer.description,
        split: layer.split,
        train: layer.train,
    })
}

pub fn load(preset: Option<&str>, config: Option<&Path>) -> Result<Settings> {
    let text = match config {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?),
        None => None,
    };
    resolve(preset, text.as_deref().zip(config))
}
