//! Run configuration: TOML or JSON documents, validation, dotted-key
//! overrides and the hash that ties checkpoints to their configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::TileSpec;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::features::Arch;
use crate::infer::InferConfig;
use crate::metrics::MetricsConfig;
use crate::model::{Ablation, ModelConfig};
use crate::nn::AdamWParams;
use crate::seghead::LossWeights;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub categories: Vec<String>,
    /// Square side length every image is resized to.
    pub resolution: usize,
    pub tile: TileSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            categories: Vec::new(),
            resolution: 256,
            tile: TileSpec::default(),
        }
    }
}

/// How the three losses share the epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum TrainMode {
    /// One optimizer step on the weighted sum of all losses.
    Joint,
    /// Distillation and recovery only before `seg_start_epoch`, then the
    /// segmentation loss only with hints detached.
    Sequential { seg_start_epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWParams,
    /// Zero-based epochs from which the learning rate is multiplied by
    /// `lr_decay` once more.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Swap the backbones for the small random stand-ins.
    pub desk_scale: bool,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            optimizer: AdamWParams::default(),
            milestones: vec![40, 45],
            lr_decay: 0.2,
            seed: 0,
            mode: TrainMode::Joint,
            desk_scale: false,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.optimizer.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub distill: DistillConfig,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub infer: InferConfig,
    pub metrics: MetricsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            distill: DistillConfig::default(),
            loss: LossWeights::default(),
            ablation: Ablation::default(),
            infer: InferConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl Config {
    /// Settings for the small random backbones on the bundled toy data.
    pub fn desk() -> Self {
        let mut c = Config::default();
        c.dataset.resolution = 64;
        c.model = ModelConfig::desk();
        c.train.desk_scale = true;
        c.train.epochs = 10;
        c.train.batch_size = 8;
        c.train.optimizer.lr = 2e-3;
        c.train.milestones = vec![8, 9];
        c.synth.perlin_scale_range = [1, 8];
        c
    }

    /// Parses TOML, or JSON when the document starts with `{`.
    pub fn from_str_any(text: &str) -> Result<Self> {
        let cfg: Config = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(config_err)?
        } else {
            toml::from_str(text).map_err(config_err)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_any(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to plain strings. Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).map_err(config_err)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut node = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override key {key} descends into a non-table")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let cfg: Config = doc.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if let Some(&m) = t.milestones.iter().max() {
            if t.epochs < m {
                return Err(Error::Config(format!(
                    "train.epochs ({}) must be at least the last milestone ({m})",
                    t.epochs
                )));
            }
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return Err(Error::Config(format!("train.lr_decay must lie in (0, 1], got {}", t.lr_decay)));
        }
        let o = &t.optimizer;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("train.optimizer has invalid values: {o:?}")));
        }
        if let TrainMode::Sequential { seg_start_epoch } = t.mode {
            if seg_start_epoch == 0 || seg_start_epoch >= t.epochs {
                return Err(Error::Config("train.mode.seg_start_epoch must lie in [1, epochs)".into()));
            }
            if self.ablation.ws {
                return Err(Error::Config("sequential mode needs the segmentation branch".into()));
            }
        }
        let r = self.dataset.resolution;
        if r == 0 || r % 32 != 0 {
            return Err(Error::Config(format!("dataset.resolution must be a positive multiple of 32, got {r}")));
        }
        if self.model.seg_width == 0 {
            return Err(Error::Config("model.seg_width must be at least 1".into()));
        }
        let l = &self.loss;
        for (k, v) in [("lambda_dis", l.lambda_dis), ("lambda_rec", l.lambda_rec), ("lambda_bce", l.lambda_bce)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{k} must be finite and non-negative, got {v}")));
            }
        }
        self.dataset.tile.validate()?;
        self.synth.validate()?;
        self.ablation.validate()?;
        self.infer.validate()?;
        self.metrics.validate()?;
        Ok(())
    }

    /// Model settings with the desk-scale switch applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.train.desk_scale {
            m.backbone.teacher_arch = Arch::DeskTeacher;
            m.backbone.student_arch = Arch::DeskStudent;
            m.backbone.student_pretrained = false;
        }
        m
    }

    /// Hash of every setting that shapes trained weights. Paths, inference
    /// and metric settings are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset.root = PathBuf::new();
        c.dataset.categories.clear();
        c.train.output_dir = PathBuf::new();
        c.synth.texture_root = PathBuf::new();
        c.model.backbone.weights_dir = PathBuf::new();
        c.infer = InferConfig::default();
        c.metrics = MetricsConfig::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(0), 5e-4);
        assert_eq!(t.lr_at(39), 5e-4);
        assert!((t.lr_at(41) - 1e-4).abs() < 1e-15);
        assert!((t.lr_at(46) - 2e-5).abs() < 1e-15);
    }

    #[test]
    fn defaults_validate_and_round_trip() -> Result<()> {
        for c in [Config::default(), Config::desk()] {
            c.validate()?;
            let back = Config::from_str_any(&c.to_toml()?)?;
            assert_eq!(back, c);
            let json = serde_json::to_string(&c)?;
            assert_eq!(Config::from_str_any(&json)?, c);
        }
        Ok(())
    }

    #[test]
    fn unknown_key_is_named() {
        let e = Config::from_str_any("[train]\nepohcs = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("epohcs"), "{e}");
        let e = Config::default().with_overrides(&["ablation.wx=true".into()]).unwrap_err();
        assert!(e.to_string().contains("wx"), "{e}");
    }

    #[test]
    fn overrides_apply() -> Result<()> {
        let c = Config::default().with_overrides(&[
            "train.seed=7".into(),
            "ablation.ws=true".into(),
            "dataset.root=/tmp/x".into(),
            "loss.lambda_rec=0.1".into(),
        ])?;
        assert_eq!(c.train.seed, 7);
        assert!(c.ablation.ws);
        assert_eq!(c.dataset.root, PathBuf::from("/tmp/x"));
        assert_eq!(c.loss.lambda_rec, 0.1);
        Ok(())
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = [
            "train.batch_size=0",
            "train.epochs=10",
            "ablation.wrc=true\nablation.ws=true",
            "dataset.resolution=100",
            "synth.threshold=1.5",
        ];
        for b in bad {
            let o: Vec<String> = b.lines().map(String::from).collect();
            assert!(Config::default().with_overrides(&o).is_err(), "{b}");
        }
    }

    #[test]
    fn hash_ignores_paths_but_not_ablations() -> Result<()> {
        let a = Config::default();
        let b = a.with_overrides(&["dataset.root=elsewhere".into(), "infer.sigma=2.0".into()])?;
        assert_eq!(a.hash(), b.hash());
        let c = a.with_overrides(&["ablation.wp=true".into()])?;
        assert_ne!(a.hash(), c.hash());
        Ok(())
    }
}
