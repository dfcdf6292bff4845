//! The experiment config: one JSON document, overridable by dotted paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use dmdp::data::{SarcasmCase, SplitPolicy};
use dmdp::encoder::{EncoderConfig, PretrainOptions};
use dmdp::prompts::PromptConfig;
use dmdp::training::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic task used when `manifest` is unset.
    pub case: SarcasmCase,
    /// Number of synthetic samples.
    pub n: usize,
    /// Generator seed.
    pub seed: u64,
    /// Labelled pool on disk; replaces the generator.
    pub manifest: Option<PathBuf>,
    /// Pool to draw validation samples from.
    pub valid_manifest: Option<PathBuf>,
    /// Fixed test set; otherwise the pool remainder.
    pub test_manifest: Option<PathBuf>,
    /// Previously saved split directory; replaces sampling.
    pub split_dir: Option<PathBuf>,
    /// Vocabulary file; the synthetic vocabulary otherwise.
    pub vocab: Option<PathBuf>,
    pub split: SplitPolicy,
    pub split_seed: u64,
    /// Extra corpora scored by `eval` without training.
    pub targets: Vec<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            case: SarcasmCase::Incongruity,
            n: 2048,
            seed: 1,
            manifest: None,
            valid_manifest: None,
            test_manifest: None,
            split_dir: None,
            vocab: None,
            split: SplitPolicy::KShot { k: 20 },
            split_seed: 0,
            targets: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds both the backbone initialization and the pair order.
    pub seed: u64,
    /// Number of synthetic congruent pairs.
    pub pairs: usize,
    pub pair_seed: u64,
    /// Congruent pairs on disk; replaces the generator.
    pub manifest: Option<PathBuf>,
    /// Skip `backbone.ckpt` and use a frozen random backbone.
    pub random_backbone: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let o = PretrainOptions::default();
        PretrainConfig {
            epochs: o.epochs,
            lr: o.lr,
            batch_size: o.batch_size,
            seed: o.seed,
            pairs: 256,
            pair_seed: 99,
            manifest: None,
            random_backbone: false,
        }
    }
}

impl PretrainConfig {
    pub fn options(&self) -> PretrainOptions {
        PretrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// One split per seed, sampled with that seed.
    Paired,
    /// One split (sampled with `data.split_seed`) shared by every seed.
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub pairing: Pairing,
    /// Depth sweep settings; empty means `1..=encoder.layers`.
    pub depths: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Test samples exported by `attn`.
    pub attn_samples: usize,
    /// Also export one map per attention head.
    pub per_head: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![0, 1, 2],
            pairing: Pairing::Paired,
            depths: Vec::new(),
            lengths: vec![1, 2, 4, 8],
            attn_samples: 4,
            per_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub experiment: ExperimentSection,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            encoder: EncoderConfig::default(),
            prompt: PromptConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            experiment: ExperimentSection::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every leaf path of a JSON object, dotted.
fn leaf_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                if child.is_object() {
                    leaf_keys(child, &path, out);
                } else {
                    out.push(path);
                }
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Reads a config file; missing keys take defaults.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn valid_keys(&self) -> Vec<String> {
        let mut keys = Vec::new();
        leaf_keys(&serde_json::to_value(self).expect("config serializes"), "", &mut keys);
        keys
    }

    /// Applies `key=value` overrides in order. Unknown keys are usage errors.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self, CliError> {
        let mut root = serde_json::to_value(&self).expect("config serializes");
        let keys = self.valid_keys();
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{set}`")))?;
            let known = keys.iter().any(|k| k == key || k.starts_with(&format!("{key}.")));
            if !known {
                return Err(CliError::Usage(format!(
                    "unknown config key `{key}`; valid keys are:\n  {}",
                    keys.join("\n  ")
                )));
            }
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot.get_mut(part).expect("key checked above");
            }
            *slot = parse_value(raw);
        }
        serde_json::from_value(root).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Caps the prompt depth at the encoder depth.
    pub fn resolved(mut self) -> Self {
        self.prompt = self.prompt.capped(self.encoder.layers);
        self
    }

    /// Checks every section and that referenced files exist.
    pub fn validate(&self) -> Result<(), CliError> {
        self.encoder.validate()?;
        self.prompt.validate(&self.encoder)?;
        self.train.validate()?;
        let invalid = |m: String| Err(CliError::Validation(m));
        if self.pretrain.batch_size < 2 {
            return invalid("pretrain.batch_size must be at least 2".into());
        }
        if !(self.pretrain.lr.is_finite() && self.pretrain.lr > 0.0) {
            return invalid("pretrain.lr must be positive".into());
        }
        if self.data.manifest.is_none() && self.data.n < 4 {
            return invalid(format!("data.n must be at least 4, got {}", self.data.n));
        }
        match self.data.split {
            SplitPolicy::KShot { k: 0 } => return invalid("data.split.k must be at least 1".into()),
            SplitPolicy::Percent { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                return invalid("data.split.fraction must lie in (0, 1]".into())
            }
            _ => {}
        }
        let paths = [
            ("data.manifest", self.data.manifest.as_ref()),
            ("data.valid_manifest", self.data.valid_manifest.as_ref()),
            ("data.test_manifest", self.data.test_manifest.as_ref()),
            ("data.split_dir", self.data.split_dir.as_ref()),
            ("data.vocab", self.data.vocab.as_ref()),
            ("pretrain.manifest", self.pretrain.manifest.as_ref()),
        ];
        for (key, p) in paths {
            if let Some(p) = p {
                if !p.exists() {
                    return invalid(format!("{key}: {} does not exist", p.display()));
                }
            }
        }
        if let Some(p) = self.data.targets.iter().find(|p| !p.exists()) {
            return invalid(format!("data.targets: {} does not exist", p.display()));
        }
        if self.experiment.seeds.is_empty() {
            return invalid("experiment.seeds must not be empty".into());
        }
        Ok(())
    }
}
