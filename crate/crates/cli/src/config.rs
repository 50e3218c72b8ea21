//! Run configuration: a TOML file with `world`, `model`, `train`, `data` and
//! `output` tables, plus `key=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskdecomp::{ModelConfig, TrainConfig, WorldSpec};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub val_size: usize,
    /// Seed of the training split; the validation split uses `seed + 1`.
    pub seed: u64,
    /// Read the splits from `TDS1` files instead of generating them.
    pub train_file: Option<PathBuf>,
    pub val_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 512,
            val_size: 128,
            seed: 1,
            train_file: None,
            val_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` and checks
    /// that the tables agree with each other.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let w = &self.world;
        let m = &self.model;
        if m.num_classes != w.num_classes() || m.num_scenes != w.num_scenes() || m.image_size != (w.height, w.width) {
            return Err(CliError::Config(format!(
                "model (K={}, S={}, image {:?}) does not match world (K={}, S={}, image {:?})",
                m.num_classes,
                m.num_scenes,
                m.image_size,
                w.num_classes(),
                w.num_scenes(),
                (w.height, w.width)
            )));
        }
        if m.in_channels != 1 {
            return Err(CliError::Config("generated images have one channel; set model.in_channels = 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Writes `config.resolved.toml` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.resolved.toml"), self.to_toml())?;
        Ok(())
    }
}

/// Sets a dotted `key=value` in `table`. The value is read as a TOML
/// literal, falling back to a plain string.
pub fn apply_override(table: &mut Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` is malformed")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));

    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
