//! Versioned run configuration shared by every command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use convsynth::dictionary::CdlConfig;
use convsynth::highpass::HighpassConfig;
use convsynth::lambda_maps::DEFAULT_BOUND;
use convsynth::metrics::MetricSettings;
use convsynth::simulate::{MaskKind, DEFAULT_KEEP_FRACTION};
use convsynth::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{config_error, CliError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub pretrain: Option<PretrainSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub reconstruct: Option<ReconstructSection>,
    #[serde(default)]
    pub evaluate: Option<EvaluateSection>,
    #[serde(default)]
    pub metrics: MetricSettings,
}

/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub dictionary: PathBuf,
    pub checkpoint: PathBuf,
    pub reconstruction: PathBuf,
    pub evaluation: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            dictionary: "dictionary".into(),
            checkpoint: "checkpoint".into(),
            reconstruction: "reconstruction".into(),
            evaluation: "evaluation".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub size: [usize; 2],
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default = "default_ellipses")]
    pub ellipses: usize,
    /// Noise levels assigned to samples in rotation.
    pub sigmas: Vec<f64>,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    #[serde(default)]
    pub mask_kind: MaskKind,
    pub seed: u64,
}

fn default_ellipses() -> usize {
    8
}

fn default_keep() -> f64 {
    DEFAULT_KEEP_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// Number of training targets the dictionary is learned from.
    pub images: usize,
    pub highpass: HighpassConfig,
    pub cdl: CdlConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Constant,
    Heuristic,
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub source: SourceKind,
    #[serde(default = "default_lambda")]
    pub init_lambda: f64,
    #[serde(default = "default_beta")]
    pub init_beta: f64,
    #[serde(default = "default_bound")]
    pub bound: f64,
    /// Gain of the final network layer at initialization.
    #[serde(default = "default_gain")]
    pub last_gain: f64,
    #[serde(default = "default_scale")]
    pub heuristic_scale: f64,
    #[serde(default = "default_window")]
    pub heuristic_window: usize,
    /// Checkpoint whose beta (and lambda, for a constant source) seeds the
    /// initialization.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    /// Continue from `<checkpoint>/last` when it exists.
    #[serde(default)]
    pub resume: bool,
    pub config: TrainConfig,
}

fn default_lambda() -> f64 {
    0.05
}
fn default_beta() -> f64 {
    1.0
}
fn default_bound() -> f64 {
    DEFAULT_BOUND
}
fn default_gain() -> f64 {
    0.1
}
fn default_scale() -> f64 {
    0.5
}
fn default_window() -> usize {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSection {
    #[serde(default = "default_split")]
    pub split: String,
    /// Sample indices within the split; all samples when absent.
    #[serde(default)]
    pub samples: Option<Vec<usize>>,
    /// Defaults to `<paths.checkpoint>/best`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub png: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default = "default_split")]
    pub split: String,
    /// Method name to checkpoint directory.
    #[serde(default)]
    pub methods: BTreeMap<String, PathBuf>,
    #[serde(default = "default_true")]
    pub zero_filled: bool,
}

fn default_split() -> String {
    "test".into()
}

fn default_true() -> bool {
    true
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// A parsed config together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_error(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let config = parse(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base })
}

fn check_split(name: &str) -> Result<(), CliError> {
    if !SPLITS.contains(&name) {
        return Err(config_error(format!("unknown split {name:?}, expected one of {SPLITS:?}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != SCHEMA_VERSION {
            return Err(config_error(format!("config version {} is not supported (expected {SCHEMA_VERSION})", self.version)));
        }
        if let Some(s) = &self.simulate {
            if s.size[0] == 0 || s.size[1] == 0 {
                return Err(config_error("image size must be positive"));
            }
            if s.sigmas.is_empty() || s.sigmas.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(config_error("sigmas must be a non-empty list of finite values >= 0"));
            }
            if !(s.keep_fraction > 0.0 && s.keep_fraction <= 1.0) {
                return Err(config_error(format!("keep fraction {} must lie in (0, 1]", s.keep_fraction)));
            }
        }
        if let Some(p) = &self.pretrain {
            if p.images == 0 {
                return Err(config_error("pre-training needs at least one image"));
            }
            p.cdl.validate().map_err(|e| config_error(e.to_string()))?;
            p.highpass.validate().map_err(|e| config_error(e.to_string()))?;
        }
        if let Some(t) = &self.train {
            t.config.validate().map_err(|e| config_error(e.to_string()))?;
            if !(t.init_lambda > 0.0 && t.init_lambda <= t.bound) {
                return Err(config_error(format!("init_lambda {} must lie in (0, bound]", t.init_lambda)));
            }
            if !(t.init_beta > 0.0 && t.init_beta.is_finite()) {
                return Err(config_error("init_beta must be positive"));
            }
        }
        if let Some(r) = &self.reconstruct {
            check_split(&r.split)?;
        }
        if let Some(e) = &self.evaluate {
            check_split(&e.split)?;
            if e.methods.keys().any(|k| k.is_empty() || k.contains(',')) {
                return Err(config_error("method names must be non-empty and contain no commas"));
            }
        }
        Ok(())
    }
}
