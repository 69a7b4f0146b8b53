//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]` and
//! `[eval]` tables. Every key is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use gsglab_core::data::{self, AugmentConfig, Dataset, GeneratorConfig};
use gsglab_core::eval::ProbeConfig;
use gsglab_core::nn::{ArchSpec, MlpSpec};
use gsglab_core::objective::{LossStrategy, SelectionInput};
use gsglab_core::train::optim::Schedule;
use gsglab_core::train::{Algorithm, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_with::{serde_as, DisplayFromStr};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Reads a CSV dataset instead of generating clusters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub cluster_sigma: f64,
    pub seed: u64,
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub derange: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let a = AugmentConfig::default();
        Self {
            csv: None,
            classes: g.classes,
            per_class: g.per_class,
            d_in: g.d_in,
            cluster_sigma: g.cluster_sigma,
            seed: g.seed,
            noise_sigma: a.noise_sigma,
            mask_prob: a.mask_prob,
            scale_lo: a.scale_range.0,
            scale_hi: a.scale_range.1,
            derange: true,
        }
    }
}

#[serde_as]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde_as(as = "DisplayFromStr")]
    pub algorithm: Algorithm,
    pub predictor: bool,
    pub tau: f64,
    #[serde_as(as = "DisplayFromStr")]
    pub selection_input: SelectionInput,
    pub backbone_dims: Vec<usize>,
    pub projector_dims: Vec<usize>,
    pub predictor_dims: Vec<usize>,
    pub backbone_output_norm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            algorithm: t.algorithm,
            predictor: t.predictor_enabled,
            tau: t.tau,
            selection_input: t.selection_input,
            backbone_dims: t.arch.backbone.layer_dims.clone(),
            projector_dims: t.arch.projector.layer_dims.clone(),
            predictor_dims: t.arch.predictor.layer_dims.clone(),
            backbone_output_norm: t.arch.backbone.output_norm,
        }
    }
}

#[serde_as]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    #[serde_as(as = "DisplayFromStr")]
    pub strategy: LossStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde_as(as = "DisplayFromStr")]
    pub schedule: Schedule,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            strategy: t.strategy,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr_base,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            schedule: t.schedule,
            seed: t.seed,
            steps_per_epoch: t.steps_per_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub every: usize,
    pub knn_k: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let p = ProbeConfig::default();
        Self {
            every: t.eval_every,
            knn_k: t.knn_k,
            probe_epochs: p.epochs,
            probe_lr: p.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a TOML config, or the `config` object of a `manifest.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: crate::manifest::RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            return Ok(manifest.config);
        }
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain tables serialise")
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            noise_sigma: self.data.noise_sigma,
            mask_prob: self.data.mask_prob,
            scale_range: (self.data.scale_lo, self.data.scale_hi),
        }
    }

    pub fn arch(&self) -> ArchSpec {
        let base = ArchSpec::default();
        ArchSpec {
            backbone: MlpSpec::new(
                self.model.backbone_dims.clone(),
                base.backbone.hidden_norm,
                self.model.backbone_output_norm,
            ),
            projector: MlpSpec::new(
                self.model.projector_dims.clone(),
                base.projector.hidden_norm,
                base.projector.output_norm,
            ),
            predictor: MlpSpec::new(
                self.model.predictor_dims.clone(),
                base.predictor.hidden_norm,
                base.predictor.output_norm,
            ),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            algorithm: self.model.algorithm,
            strategy: self.train.strategy,
            predictor_enabled: self.model.predictor,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr_base: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            schedule: self.train.schedule,
            tau: self.model.tau,
            seed: self.train.seed,
            selection_input: self.model.selection_input,
            derange: self.data.derange,
            steps_per_epoch: self.train.steps_per_epoch,
            augment: self.augment(),
            arch: self.arch(),
            eval_every: self.eval.every,
            knn_k: self.eval.knn_k,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.eval.probe_epochs,
            lr: self.eval.probe_lr,
            seed: self.train.seed,
            ..ProbeConfig::default()
        }
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let ds = match &self.data.csv {
            Some(path) => data::load_csv(path, self.data.seed)?,
            None => data::generate(&GeneratorConfig {
                classes: self.data.classes,
                per_class: self.data.per_class,
                d_in: self.data.d_in,
                cluster_sigma: self.data.cluster_sigma,
                seed: self.data.seed,
            })?,
        };
        Ok(ds)
    }

    /// Validates everything that can be checked without running.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }
}
