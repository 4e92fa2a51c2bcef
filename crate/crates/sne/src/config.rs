//! Experiment configuration: one TOML file drives every pipeline stage.

use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::partition::PartitionScheme;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub disentangle: DisentangleConfig,
    pub ensemble: EnsembleConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// synth | cifar10 | mnist
    pub name: String,
    /// Directory with the raw files; falls back to `SNE_DATA_DIR`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub desk_scale: bool,
    /// Synthetic data shape; ignored for file-backed datasets.
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_input_shape")]
    pub input_shape: [usize; 3],
}

fn default_classes() -> usize {
    3
}
fn default_per_class() -> usize {
    16
}
fn default_separation() -> f64 {
    6.0
}
fn default_input_shape() -> [usize; 3] {
    [3, 8, 8]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    /// tiny | vgg5 | vgg11 | vgg19 | resnet10 | resnet18
    pub arch: String,
    #[serde(default)]
    pub mini: bool,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisentangleMode {
    /// No fine-tune; partitioning sees the raw teacher features.
    None,
    /// Keep the teacher frozen and partition by the configured scheme.
    FrozenCluster,
    /// Similarity fine-tune; forces the contiguous partition.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisentangleConfig {
    pub mode: DisentangleMode,
    /// Scheme used by the partition stage (frozen_cluster mode).
    pub scheme: PartitionScheme,
    /// Similarity weight, <= 0.
    pub lambda: f64,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_students: usize,
    pub alpha: f64,
    pub t_steps: usize,
    /// all | trained_dropout
    pub policy: String,
    #[serde(default)]
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub sigmas: Vec<f64>,
    pub repeats: usize,
    #[serde(default)]
    pub clamp: bool,
    pub batch_size: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        let cfg = Self::from_toml(&text)?;
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {})",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        match self.dataset.name.as_str() {
            "synth" => {
                if self.dataset.classes < 2 || self.dataset.per_class == 0 {
                    return Err(Error::Config("synth dataset needs >= 2 classes with samples".into()));
                }
                if self.dataset.separation <= 0.0 {
                    return Err(Error::Config("synth separation must be positive".into()));
                }
            }
            "cifar10" | "mnist" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset '{}', expected synth|cifar10|mnist",
                    other
                )))
            }
        }
        match self.teacher.arch.as_str() {
            "tiny" | "vgg5" | "vgg11" | "vgg19" | "resnet10" | "resnet18" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown teacher arch '{}'",
                    other
                )))
            }
        }
        if self.teacher.feature_dim == 0 || self.teacher.epochs == 0 || self.teacher.batch_size == 0
        {
            return Err(Error::Config("teacher dims/epochs/batch must be positive".into()));
        }
        if self.disentangle.lambda > 0.0 {
            return Err(Error::Config("disentangle lambda must be <= 0".into()));
        }
        if self.disentangle.mode == DisentangleMode::Finetune
            && self.teacher.feature_dim % self.ensemble.n_students != 0
        {
            return Err(Error::Config(format!(
                "feature dim {} not divisible by {} students for finetune",
                self.teacher.feature_dim, self.ensemble.n_students
            )));
        }
        if self.ensemble.n_students == 0 {
            return Err(Error::Config("need at least one student".into()));
        }
        if self.ensemble.alpha < 0.0 {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if self.ensemble.t_steps == 0 {
            return Err(Error::Config("T must be >= 1".into()));
        }
        match self.ensemble.policy.as_str() {
            "all" => {}
            "trained_dropout" => {
                let k = self.ensemble.k;
                if k == 0 || k > self.ensemble.n_students {
                    return Err(Error::Config(format!(
                        "K={} outside 1..={}",
                        k, self.ensemble.n_students
                    )));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown policy '{}', expected all|trained_dropout",
                    other
                )))
            }
        }
        if self.ensemble.epochs == 0 || self.ensemble.batch_size == 0 {
            return Err(Error::Config("ensemble epochs/batch must be positive".into()));
        }
        if self.eval.sigmas.iter().any(|s| *s < 0.0) {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        if self.eval.repeats == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("eval repeats/batch must be positive".into()));
        }
        Ok(())
    }

    /// CI-sized default: synthetic blobs, tiny specs, short schedules.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 7,
            dataset: DatasetConfig {
                name: "synth".into(),
                path: None,
                desk_scale: true,
                classes: 3,
                per_class: 16,
                separation: 6.0,
                input_shape: [3, 8, 8],
            },
            teacher: TeacherConfig {
                arch: "tiny".into(),
                mini: false,
                feature_dim: 8,
                epochs: 20,
                batch_size: 8,
                optimizer: OptimizerConfig::adam(5e-3),
            },
            disentangle: DisentangleConfig {
                mode: DisentangleMode::Finetune,
                scheme: PartitionScheme::Contiguous,
                lambda: -2.0,
                epochs: 20,
                optimizer: OptimizerConfig::adam(1e-2),
            },
            ensemble: EnsembleConfig {
                n_students: 2,
                alpha: 2.0,
                t_steps: 4,
                policy: "all".into(),
                k: 0,
                epochs: 20,
                batch_size: 8,
                optimizer: OptimizerConfig::adam(1e-2),
            },
            eval: EvalConfig {
                sigmas: vec![0.0, 0.01, 0.03, 0.05, 0.07],
                repeats: 10,
                clamp: false,
                batch_size: 8,
            },
        }
    }

    /// Full-scale CIFAR-10 profile; long-running, excluded from CI.
    pub fn full_default() -> Self {
        let mut cfg = Self::desk_default();
        cfg.dataset = DatasetConfig {
            name: "cifar10".into(),
            path: None,
            desk_scale: false,
            classes: 10,
            per_class: 0,
            separation: 1.0,
            input_shape: [3, 32, 32],
        };
        cfg.dataset.per_class = 5000;
        cfg.teacher = TeacherConfig {
            arch: "vgg19".into(),
            mini: false,
            feature_dim: 512,
            epochs: 100,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(1e-3),
        };
        cfg.disentangle.epochs = 15;
        cfg.disentangle.lambda = -0.1;
        cfg.ensemble = EnsembleConfig {
            n_students: 2,
            alpha: 2.0,
            t_steps: 4,
            policy: "all".into(),
            k: 0,
            epochs: 60,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(1e-3),
        };
        cfg
    }
}
