//! Experiment configuration: one TOML file plus `AMQ_<SECTION>__<KEY>`
//! environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::validate_levels;
use crate::aux::AuxConfig;
use crate::dataset::DataConfig;
use crate::error::{AmqError, Result};
use crate::train::{Mode, ModelConfig, TrainConfig};

pub const ENV_PREFIX: &str = "AMQ_";

/// One training run of a sweep, on top of the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub mode: Mode,
    pub levels: Vec<u32>,
    pub ratios: Vec<f64>,
}

impl SweepPoint {
    pub fn new(mode: Mode, levels: Vec<u32>, ratios: Vec<f64>) -> Self {
        Self { mode, levels, ratios }
    }

    pub fn uniform(bits: u32) -> Self {
        Self::new(Mode::Uniform, vec![bits], vec![1.0])
    }

    /// Directory-safe identifier, e.g. `targeted-4_8-0.5_0.5`.
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.mode.as_str(), join(&self.levels, "_"), join(&self.ratios, "_"))
    }
}

pub fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub points: Vec<SweepPoint>,
    /// Seeds to repeat every point with; empty means `train.seed` only.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let mix = |mode, r: f64| SweepPoint::new(mode, vec![4, 8], vec![1.0 - r, r]);
        Self {
            points: vec![
                SweepPoint::uniform(4),
                SweepPoint::uniform(8),
                mix(Mode::Targeted, 0.25),
                mix(Mode::Targeted, 0.5),
                mix(Mode::Targeted, 0.75),
                mix(Mode::Random, 0.5),
            ],
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub dataset: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "runs".into(), dataset: "data/darcy.jsonl".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub aux: AuxConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

fn config_err(e: impl std::fmt::Display) -> AmqError {
    AmqError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(config_err)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Reads `path` (defaults when `None`), then applies overrides from
    /// `vars` whose names start with [`ENV_PREFIX`].
    pub fn load(path: Option<&Path>, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| AmqError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text)?;
        for (k, v) in vars {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                cfg = cfg.with_override(rest, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets `SECTION__KEY` (case-insensitive) to `value`, read as a TOML
    /// literal when possible and as a string otherwise.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let lower = key.to_ascii_lowercase();
        let (section, field) = lower
            .split_once("__")
            .ok_or_else(|| AmqError::Config(format!("override {key} is not of the form SECTION__KEY")))?;
        let mut table = toml::Table::try_from(self).map_err(config_err)?;
        let sect = table
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| AmqError::Config(format!("unknown config section {section}")))?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        sect.insert(field.to_string(), parsed);
        toml::Value::Table(table).try_into().map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>, what: &str| r.map_err(|e| AmqError::Config(format!("{what}: {e}")));
        wrap(self.data.validate(), "data")?;
        wrap(self.train.validate(), "train")?;
        wrap(self.model.network_config(&self.train.levels, 1, 2, 1).map(|_| ()), "model")?;
        wrap(self.aux.network_config(1, 2, self.model.ema_decay).map(|_| ()), "aux")?;
        for p in &self.sweep.points {
            wrap(validate_levels(&p.levels, &p.ratios), "sweep point")?;
            wrap(self.model.network_config(&p.levels, 1, 2, 1).map(|_| ()), "sweep point")?;
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    /// Output locations do not take part, so a run hashes the same
    /// wherever it is written.
    pub fn hash(&self) -> String {
        let identity = Self { output: OutputConfig::default(), ..self.clone() };
        let json = serde_json::to_vec(&identity).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        if self.sweep.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.sweep.seeds.clone()
        }
    }

    /// Base configuration specialised to one sweep point and seed.
    pub fn for_point(&self, point: &SweepPoint, seed: u64, dir: PathBuf) -> Self {
        let mut c = self.clone();
        c.train.mode = point.mode;
        c.train.levels = point.levels.clone();
        c.train.ratios = point.ratios.clone();
        c.train.seed = seed;
        c.output.dir = dir;
        c
    }
}
