//! Experiment configuration files: flat JSON with a strict schema. Unknown
//! keys are rejected so typos fail loudly instead of silently using
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compress::CompressorKind;
use crate::data::{DatasetName, DatasetSpec, TaskKind};
use crate::error::{MangoError, Result};
use crate::flow::{ModelSpec, ModelVariant};
use crate::partition::ModalityLayout;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorSection {
    pub kind: CompressorKind,
    pub k: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_weight_task")]
    pub weight_task: f64,
}

fn default_batch_size() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_task() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
}

/// Grid selection for `compare`. Schema extension beyond the single-run
/// keys: absent section means "run every grid over seeds 0..2".
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_grids")]
    pub grids: Vec<String>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_grids() -> Vec<String> {
    vec![
        "variants".into(),
        "partitions".into(),
        "latent".into(),
        "blocks".into(),
    ]
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            seeds: default_seeds(),
            grids: default_grids(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub d_model: usize,
    pub n_tokens_per_modality: usize,
    pub blocks: usize,
    /// Generator observation-noise sigma override; absent means the
    /// dataset's default.
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub compressor: Option<CompressorSection>,
    pub train: TrainSection,
    #[serde(default)]
    pub task: Option<TaskSection>,
    #[serde(default)]
    pub compare: Option<CompareSection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| MangoError::Config {
                field: "config".into(),
                detail: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(MangoError::Config {
                field: "d_model".into(),
                detail: "must be positive".into(),
            });
        }
        if self.n_tokens_per_modality == 0 || self.n_tokens_per_modality % 2 != 0 {
            return Err(MangoError::Config {
                field: "n_tokens_per_modality".into(),
                detail: format!(
                    "must be positive and even, got {}",
                    self.n_tokens_per_modality
                ),
            });
        }
        if let Some(n) = self.noise {
            if !(n >= 0.0 && n.is_finite()) {
                return Err(MangoError::Config {
                    field: "noise".into(),
                    detail: format!("must be finite and non-negative, got {n}"),
                });
            }
        }
        if let Some(c) = &self.compressor {
            if c.k == 0 || c.k >= self.d_model {
                return Err(MangoError::Config {
                    field: "compressor.k".into(),
                    detail: format!("k = {} must be in 1..d_model ({})", c.k, self.d_model),
                });
            }
        }
        self.train_config().validate()
    }

    pub fn dataset_spec(&self, size: usize) -> DatasetSpec {
        let mut spec = DatasetSpec::new(self.dataset, self.train.seed, size);
        spec.d_model = self.d_model;
        spec.tokens = self.n_tokens_per_modality;
        if let Some(n) = self.noise {
            spec.noise = n;
        }
        spec
    }

    /// The flow's feature width after optional compression.
    pub fn flow_d_model(&self) -> usize {
        self.compressor.as_ref().map(|c| c.k).unwrap_or(self.d_model)
    }

    pub fn model_spec(&self, variant: ModelVariant) -> Result<ModelSpec> {
        Ok(ModelSpec {
            variant,
            layout: ModalityLayout::new(self.n_tokens_per_modality, self.n_tokens_per_modality)?,
            d_model: self.flow_d_model(),
            blocks: self.blocks,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            learning_rate: self.train.lr,
            eval_every: (self.train.steps / 10).clamp(1, 100),
            seed: self.train.seed,
            weight_task: self.train.weight_task,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
        "dataset": "correlated-gaussians",
        "d_model": 4,
        "n_tokens_per_modality": 4,
        "blocks": 2,
        "compressor": {"kind": "pca", "k": 2},
        "train": {"steps": 100, "batch_size": 8, "lr": 0.001, "seed": 0, "weight_task": 1.0},
        "task": {"kind": "classification"}
    }"#;

    #[test]
    fn full_config_parses() {
        let cfg: ExperimentConfig = serde_json::from_str(GOOD).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.flow_d_model(), 2);
        assert_eq!(cfg.train_config().eval_every, 10);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = GOOD.replace("\"blocks\"", "\"blocka\"");
        let err = serde_json::from_str::<ExperimentConfig>(&bad).unwrap_err();
        assert!(err.to_string().contains("blocka"), "{err}");
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let min = r#"{
            "dataset": "two-moons-pair",
            "d_model": 4,
            "n_tokens_per_modality": 4,
            "blocks": 1,
            "train": {"steps": 10}
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(min).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.weight_task, 1.0);
        assert!(cfg.compressor.is_none());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let bad = GOOD.replace("\"k\": 2", "\"k\": 4");
        let cfg: ExperimentConfig = serde_json::from_str(&bad).unwrap();
        match cfg.validate() {
            Err(MangoError::Config { field, .. }) => assert_eq!(field, "compressor.k"),
            other => panic!("expected config error, got {other:?}"),
        }
        let bad = GOOD.replace("\"n_tokens_per_modality\": 4", "\"n_tokens_per_modality\": 3");
        let cfg: ExperimentConfig = serde_json::from_str(&bad).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, GOOD).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.blocks, 2);
    }
}
