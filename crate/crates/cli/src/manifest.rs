//! `manifest.json`: everything that determines a run's outputs.

use std::path::Path;

use gsglab_core::data::{Dataset, Split};
use gsglab_core::train;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub steps_per_epoch: usize,
    pub total_updates: usize,
    pub knn_metric: String,
    pub lr_scaling: String,
    /// SHA-256 of the dataset's samples, labels and split tags.
    pub dataset_hash: String,
    /// SHA-256 of the version, the resolved config and `dataset_hash`.
    pub content_hash: String,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(config: &RunConfig, ds: &Dataset) -> Result<Self, CliError> {
        let tc = config.train_config();
        let steps = train::steps_per_epoch(&tc, ds)?;
        let dataset_hash = dataset_hash(ds);
        let mut h = Sha256::new();
        h.update(VERSION.as_bytes());
        h.update(
            serde_json::to_string(config)
                .expect("config serialises")
                .as_bytes(),
        );
        h.update(dataset_hash.as_bytes());
        Ok(Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            seed: config.train.seed,
            steps_per_epoch: steps,
            total_updates: steps * tc.epochs,
            knn_metric: "cosine".into(),
            lr_scaling: "none".into(),
            dataset_hash,
            content_hash: hex::encode(h.finalize()),
            config: config.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        std::fs::write(path, text).map_err(CliError::io(path))
    }
}

pub fn dataset_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.len() as u64).to_le_bytes());
    h.update((ds.dim() as u64).to_le_bytes());
    for v in ds.samples().data() {
        h.update(v.to_bits().to_le_bytes());
    }
    for (&l, &s) in ds.labels().iter().zip(ds.splits()) {
        h.update((l as u64).to_le_bytes());
        h.update([u8::from(s == Split::Test)]);
    }
    hex::encode(h.finalize())
}
