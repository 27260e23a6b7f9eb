//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use psumnet_core::model::{default_fusion_weight, FusionMode, ModelConfig, StreamConfig, BASE_WIDTH};
use psumnet_core::skeleton::{Part, PartGroupSpec, DEFAULT_WINDOW};
use psumnet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::DataSplit;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Relative to the config file.
    pub manifest: PathBuf,
    #[serde(default = "default_eval_split")]
    pub eval_split: DataSplit,
}

fn default_eval_split() -> DataSplit {
    DataSplit::Val
}

fn default_width() -> usize {
    BASE_WIDTH
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_persons() -> usize {
    2
}

/// The model as written in a config file: the standard architecture plus
/// optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub topology: String,
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_persons")]
    pub persons: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fusion_mode: FusionMode,
    /// Keep only these streams.
    #[serde(default)]
    pub parts: Option<Vec<Part>>,
    /// Non-overlapping, locally rooted part groups.
    #[serde(default)]
    pub disjoint_parts: bool,
    #[serde(default)]
    pub groups: Option<PartGroupSpec>,
    /// Replaces the standard stream architectures.
    #[serde(default)]
    pub streams: Option<Vec<StreamConfig>>,
    /// One weight per stream, in stream order.
    #[serde(default)]
    pub fusion_weights: Option<Vec<f64>>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::with_width(&self.topology, self.num_classes, self.width)?;
        if self.disjoint_parts {
            cfg.groups = PartGroupSpec::disjoint(&self.topology)?;
        }
        if let Some(g) = &self.groups {
            cfg.groups = g.clone();
        }
        if let Some(s) = &self.streams {
            cfg.streams = s.clone();
        }
        if let Some(parts) = &self.parts {
            if parts.is_empty() {
                return Err(Error::Usage("model.parts is empty".into()));
            }
            if let Some(p) = parts.iter().find(|p| cfg.stream(**p).is_none()) {
                return Err(Error::Usage(format!("model.parts names {p}, which has no stream")));
            }
            cfg.streams.retain(|s| parts.contains(&s.part));
        }
        cfg.fusion_weights = match &self.fusion_weights {
            Some(w) => w.clone(),
            None => cfg.streams.iter().map(|s| default_fusion_weight(s.part)).collect(),
        };
        cfg.fusion_mode = self.fusion_mode;
        cfg.window = self.window;
        cfg.persons = self.persons;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// Sets both the initialisation and the shuffling seed.
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
}

/// A loaded config with its paths resolved and overrides applied.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub file: RunConfig,
    pub manifest: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// The configuration echoed into artifacts and hashed for resuming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl EffectiveConfig {
    /// SHA-256 over the JSON form with object keys sorted.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canon = serde_json::to_vec(&value).expect("value serializes");
        Sha256::digest(&canon).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl LoadedConfig {
    pub fn effective(&self) -> EffectiveConfig {
        EffectiveConfig {
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }
}

pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
    if cfg.version != CONFIG_VERSION {
        return Err(Error::Usage(format!(
            "{}: config version {} (expected {CONFIG_VERSION})",
            path.display(),
            cfg.version
        )));
    }
    Ok(cfg)
}

/// Reads `path`, applies `overrides` and checks that the manifest exists.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut file = parse_config(&text, path)?;
    if let Some(s) = overrides.seed {
        file.model.seed = s;
        file.train.seed = s;
    }
    if let Some(e) = overrides.epochs {
        file.train.epochs = e;
    }
    if let Some(lr) = overrides.lr {
        file.train.base_lr = lr;
    }
    if let Some(b) = overrides.batch_size {
        file.train.batch_size = b;
    }
    let model = file.model.resolve()?;
    file.train.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    let manifest = base.join(&file.data.manifest);
    if !manifest.is_file() {
        return Err(Error::io(
            &manifest,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    Ok(LoadedConfig {
        train: file.train.clone(),
        file,
        manifest,
        model,
    })
}
