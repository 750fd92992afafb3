//! Run configuration and the reproducibility manifest.
//!
//! A config is one JSON document with a section per component. Every key is
//! optional; missing keys take the defaults below, unknown keys are rejected.
//! `--set section.key=value` overrides use the same dotted paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adaptation::AdaptConfig;
use crate::checkpoint::write_atomic;
use crate::desk::{desk_discriminator_config, desk_generator_config, SourcePretrainConfig};
use crate::detector::{DetectorConfig, DetectorTrainConfig, PhotometricAugment};
use crate::discriminator::DiscriminatorConfig;
use crate::embedding::EmbedderConfig;
use crate::error::{FactoryError, Result};
use crate::generator::GeneratorConfig;
use crate::label_synthesis::{DecodeConfig, LabelConfig};
use crate::optim::OptimizerConfig;
use crate::shapes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub psi: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_samples: 200, psi: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub decode: DecodeConfig,
    pub diversity_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            decode: DecodeConfig { score_thresh: 0.05, max_dets: 32 },
            diversity_samples: 50,
        }
    }
}

/// Procedural shapes benchmark: supplies every input a path does not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    pub source_images: usize,
    pub fewshot_images: usize,
    pub manual_labels: usize,
    pub test_images: usize,
    /// A candidate manual-label seed is accepted when the pretrained generator
    /// reproduces its scene with at most this pixel MSE.
    pub verify_mse: f64,
    pub source_pretrain: SourcePretrainConfig,
    pub pretrain_seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            source_images: 400,
            fewshot_images: 10,
            manual_labels: 10,
            test_images: 100,
            verify_mse: 0.06,
            source_pretrain: SourcePretrainConfig::default(),
            pretrain_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Pretrained generator and discriminator checkpoints.
    pub generator: Option<PathBuf>,
    pub discriminator: Option<PathBuf>,
    /// Labeled source dataset for stage i, or an already trained source detector.
    pub source_dataset: Option<PathBuf>,
    pub source_detector: Option<PathBuf>,
    pub fewshot_dir: Option<PathBuf>,
    pub manual_annotations: Option<PathBuf>,
    /// Labeled target test set; target AP is skipped without one.
    pub target_test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactoryConfig {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub adapt: AdaptConfig,
    pub label: LabelConfig,
    pub synth: SynthConfig,
    pub detector: DetectorConfig,
    pub source_training: DetectorTrainConfig,
    pub finetune: DetectorTrainConfig,
    pub eval: EvalConfig,
    pub embedder: EmbedderConfig,
    pub desk: DeskConfig,
    pub paths: PathsConfig,
}

fn desk_augment() -> PhotometricAugment {
    PhotometricAugment { blur: 0.5, grayscale: 0.5, channel_shuffle: 0.5 }
}

impl Default for FactoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            class_names: shapes::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            generator: desk_generator_config(),
            discriminator: desk_discriminator_config(),
            adapt: AdaptConfig {
                source_text: shapes::SOURCE_TEXT.into(),
                target_text: shapes::TARGET_TEXT.into(),
                g_optimizer: OptimizerConfig::adam(5e-4),
                d_optimizer: OptimizerConfig::adam(1e-2),
                ..AdaptConfig::default()
            },
            label: LabelConfig {
                optimizer: OptimizerConfig { beta1: 0.9, ..OptimizerConfig::adam(1e-2) },
                ..LabelConfig::default()
            },
            synth: SynthConfig::default(),
            detector: DetectorConfig::default(),
            source_training: DetectorTrainConfig {
                iters: 800,
                augment: desk_augment(),
                ..DetectorTrainConfig::default()
            },
            finetune: DetectorTrainConfig {
                iters: 300,
                optimizer: OptimizerConfig { beta1: 0.9, ..OptimizerConfig::adam(1e-3) },
                augment: desk_augment(),
                ..DetectorTrainConfig::default()
            },
            eval: EvalConfig::default(),
            embedder: EmbedderConfig { dim: 768, ..EmbedderConfig::default() },
            desk: DeskConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn check_known_keys(user: &Value, reference: &Value, path: &str) -> Result<()> {
    let (Value::Object(u), Value::Object(r)) = (user, reference) else {
        return Ok(());
    };
    for (k, v) in u {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match r.get(k) {
            None => return Err(FactoryError::config(format!("unknown config key `{here}`"))),
            // optional sections default to null and accept any object
            Some(Value::Null) => {}
            Some(rv) => check_known_keys(v, rv, &here)?,
        }
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl FactoryConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        check_known_keys(&v, &serde_json::to_value(Self::default())?, "")?;
        let cfg: Self = serde_json::from_value(v).map_err(|e| FactoryError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| FactoryError::config(format!("cannot read config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_slice(&text).map_err(|e| FactoryError::config(format!("{}: {e}", path.display())))?;
        Self::from_value(v).map_err(|e| FactoryError::config(format!("{}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides; values parse as JSON, else as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| FactoryError::config(format!("override `{o}` is not key=value")))?;
            let mut slot = &mut v;
            for part in key.split('.') {
                if slot.is_null() {
                    *slot = Value::Object(Default::default());
                }
                let known = slot.as_object().is_some_and(|m| m.contains_key(part));
                let fresh = slot.as_object().is_some_and(|m| m.is_empty());
                if !known && !fresh {
                    return Err(FactoryError::config(format!("unknown config key `{key}`")));
                }
                slot = slot.as_object_mut().expect("object").entry(part.to_string()).or_insert(Value::Null);
            }
            *slot = parse_override_value(raw);
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(FactoryError::config("class_names must not be empty"));
        }
        if self.detector.num_classes != self.class_names.len() {
            return Err(FactoryError::config(format!(
                "detector.num_classes {} disagrees with {} class names",
                self.detector.num_classes,
                self.class_names.len()
            )));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.detector.validate()?;
        self.adapt.schedule(self.generator.num_layers())?;
        self.label.stride_for(self.generator.output_side())?;
        if self.detector.image_side != self.generator.output_side() {
            return Err(FactoryError::config("detector.image_side must equal the generator output side"));
        }
        if self.synth.n_samples == 0 {
            return Err(FactoryError::config("synth.n_samples must be positive"));
        }
        if !(0.0..=1.0).contains(&self.synth.psi) {
            return Err(FactoryError::config("synth.psi must lie in [0, 1]"));
        }
        if self.eval.diversity_samples < 2 {
            return Err(FactoryError::config("eval.diversity_samples must be at least 2"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&serde_json::to_value(self)?)?)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub seconds: f64,
    #[serde(default)]
    pub traces: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: FactoryConfig,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
    pub metrics: BTreeMap<String, f64>,
    pub checksums: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: &FactoryConfig) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            config_hash: config.hash()?,
            stages: BTreeMap::new(),
            metrics: BTreeMap::new(),
            checksums: BTreeMap::new(),
        })
    }

    pub fn stage_completed(&self, name: &str) -> bool {
        self.stages.get(name).is_some_and(|s| s.status == StageStatus::Completed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        write_atomic(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| FactoryError::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| FactoryError::format(path, e.to_string()))
    }
}
