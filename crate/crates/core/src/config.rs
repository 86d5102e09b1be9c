//! Run configuration file: `[synth]`, `[train]` and `[eval]` sections mirroring
//! the corresponding config types. TOML by default, JSON for `.json` files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::evalreport::EvalConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "SELFIR_SEED";
pub const SNAPSHOT_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// A parsed file plus which seeds it set explicitly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub synth_seed_set: bool,
    pub train_seed_set: bool,
}

fn has_seed(value: &serde_json::Value, section: &str) -> bool {
    value.get(section).and_then(|s| s.get("seed")).is_some()
}

/// Parse a config file. Unknown keys are rejected so typos surface as errors.
pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value: serde_json::Value = if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    let config: RunConfig =
        serde_json::from_value(value.clone()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(LoadedConfig {
        config,
        synth_seed_set: has_seed(&value, "synth"),
        train_seed_set: has_seed(&value, "train"),
    })
}

/// Seed from the environment, used only when neither flags nor file set one.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Pick a seed: explicit flag, then file, then environment, then the default.
pub fn resolve_seed(flag: Option<u64>, file_value: u64, file_set: bool) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if file_set {
        return Ok(file_value);
    }
    Ok(env_seed()?.unwrap_or(file_value))
}

// TOML has no null; unset optional fields are omitted instead.
fn strip_nulls(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|_, v| !v.is_null());
            map.values_mut().for_each(strip_nulls);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        strip_nulls(&mut value);
        toml::to_string_pretty(&value).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Write the resolved configuration as `config.resolved.toml` in `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        self.write_snapshot_to(&dir.join(SNAPSHOT_FILE))
    }

    pub fn write_snapshot_to(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
