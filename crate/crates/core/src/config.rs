//! Run configuration: one TOML document with a section per subsystem.
//!
//! Every key can also be set from the command line as `section.key=value`;
//! command-line values win over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Result, TsgmError};
use crate::gridsim::{Suite, Tier, WorldConfig};
use crate::model::ModelConfig;
use crate::policy::SampleMode;
use crate::training::{EvalSettings, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of generated worlds shared by the training and validation suites.
    pub worlds: usize,
    pub train_per_tier: usize,
    pub val_per_tier: usize,
    pub tiers: Vec<Tier>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            worlds: 1,
            train_per_tier: 200,
            val_per_tier: 100,
            tiers: Tier::ALL.to_vec(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.worlds == 0 {
            return Err(TsgmError::validation("data.worlds", "must be at least 1"));
        }
        if self.tiers.is_empty() {
            return Err(TsgmError::validation("data.tiers", "must name at least one tier"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_steps: usize,
    /// Seed of the observation noise during evaluation.
    pub seed: u64,
    /// Worker threads for evaluation; 0 uses every available core.
    pub threads: usize,
    /// Takes the most likely action instead of sampling one.
    pub greedy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_steps: 500,
            seed: 17,
            threads: 0,
            greedy: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(TsgmError::validation("eval.max_steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            max_steps: self.max_steps,
            seed: self.seed,
            mode: if self.greedy { SampleMode::Greedy } else { SampleMode::Stochastic },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            encoder: EncoderConfig::default(),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.eval.validate()
    }

    /// Parses a TOML document, applies `overrides` on top, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| TsgmError::invalid(format!("config: {}", e.message())))?;
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let config: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_error(&e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| TsgmError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// Training and validation suites over `data.worlds` shared worlds.
    pub fn suites(&self) -> Result<(Suite, Suite)> {
        let d = &self.data;
        Suite::generate_split(self.seed, &self.world, &self.encoder, d.worlds, &d.tiers, d.train_per_tier, d.val_per_tier)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }
}

fn config_error(e: &toml::de::Error) -> TsgmError {
    // serde reports unknown keys as "unknown field `x`, expected ..."; keep that
    // message but make it name the config as the source.
    TsgmError::validation("config", e.message().to_string())
}

/// Applies one `section.key=value` assignment. The value is read as a TOML
/// literal when it parses as one, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| TsgmError::invalid(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(TsgmError::invalid(format!("override `{spec}` has an empty key segment")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cursor = table;
    for part in parents {
        let entry = cursor.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| TsgmError::validation(key.trim(), format!("`{part}` is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
