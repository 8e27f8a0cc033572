//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ModelParams;
use crate::train::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub video_dim: usize,
    pub text_dim: usize,
    pub embed_dim: usize,
    /// Row-major `video_dim x embed_dim`.
    pub w_video: Vec<f64>,
    /// Row-major `text_dim x embed_dim`.
    pub w_text: Vec<f64>,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Fingerprint of the dataset schema the weights were trained on.
    pub dataset_schema: String,
    pub epoch: usize,
    pub val_ndcg: Option<f64>,
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        config: &TrainConfig,
        dataset: &Dataset,
        epoch: usize,
        val_ndcg: Option<f64>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            video_dim: params.video_dim(),
            text_dim: params.text_dim(),
            embed_dim: params.embed_dim(),
            w_video: params.w_video.as_slice().to_vec(),
            w_text: params.w_text.as_slice().to_vec(),
            config: config.clone(),
            config_hash: config.hash(),
            dataset_schema: dataset.schema_fingerprint(),
            epoch,
            val_ndcg,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        let bad = |e: Error| Error::IncompatibleCheckpoint(e.to_string());
        Ok(ModelParams {
            w_video: Matrix::from_vec(self.video_dim, self.embed_dim, self.w_video.clone()).map_err(bad)?,
            w_text: Matrix::from_vec(self.text_dim, self.embed_dim, self.w_text.clone()).map_err(bad)?,
        })
    }

    /// Checks version, stored config hash and dataset shape.
    pub fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!("unsupported version {}", self.version)));
        }
        if self.config.hash() != self.config_hash {
            return Err(Error::IncompatibleCheckpoint("config hash does not match stored config".into()));
        }
        if self.video_dim != dataset.video_dim() || self.text_dim != dataset.text_dim() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint expects features {}/{}, dataset has {}/{}",
                self.video_dim,
                self.text_dim,
                dataset.video_dim(),
                dataset.text_dim()
            )));
        }
        if self.dataset_schema != dataset.schema_fingerprint() {
            return Err(Error::IncompatibleCheckpoint("dataset class vocabulary differs".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))
    }
}
