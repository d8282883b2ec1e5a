//! Saving and loading trained predictors as versioned JSON.
//!
//! Tensor data is stored as f64, which round-trips bit for bit through
//! serde_json's `float_roundtrip` mode and loses nothing for f32 models
//! either. Loading validates the schema version and, for networks, checks
//! every entry's name and shape against a freshly built model of the same
//! architecture, so a truncated or hand-edited file fails loudly instead of
//! producing a silently broken predictor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::RidgeModel;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{build_cs_sunet, build_pixel_nn, Architecture, ModelParams, ParamEntry};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;
use crate::train::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor in storage form.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// The predictor payload.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SavedModel {
    Network { arch: Architecture, entries: Vec<SavedTensor> },
    Ridge { weights: Vec<f64>, intercept: f64, alpha: f64 },
}

/// A trained predictor plus the settings that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// Predictor name as used on the command line, e.g. "cs-sunet". A run
    /// that disables the smoothness term records `loss.lambda = 0` here.
    pub predictor: String,
    pub seed: u64,
    pub loss: Option<LossConfig>,
    pub train: Option<TrainConfig>,
    pub best_epoch: Option<usize>,
    pub model: SavedModel,
}

/// Package trained network parameters with their training settings.
pub fn network_checkpoint<S: Scalar>(
    predictor: &str,
    seed: u64,
    loss: Option<&LossConfig>,
    train: &TrainConfig,
    best_epoch: usize,
    params: &ModelParams<S>,
) -> Checkpoint {
    let entries = params
        .entries()
        .iter()
        .map(|e| SavedTensor {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            data: e.tensor.data().iter().map(|v| v.to_f64c()).collect(),
        })
        .collect();
    Checkpoint {
        version: CHECKPOINT_VERSION,
        predictor: predictor.to_string(),
        seed,
        loss: loss.cloned(),
        train: Some(train.clone()),
        best_epoch: Some(best_epoch),
        model: SavedModel::Network { arch: params.arch().clone(), entries },
    }
}

/// Package a fitted ridge regressor.
pub fn ridge_checkpoint<S: Scalar>(predictor: &str, seed: u64, model: &RidgeModel<S>) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        predictor: predictor.to_string(),
        seed,
        loss: None,
        train: None,
        best_epoch: None,
        model: SavedModel::Ridge {
            weights: model.weights.iter().map(|v| v.to_f64c()).collect(),
            intercept: model.intercept.to_f64c(),
            alpha: model.alpha,
        },
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint {} has schema version {}, this build reads version {}",
                path.display(),
                checkpoint.version,
                CHECKPOINT_VERSION
            )));
        }
        Ok(checkpoint)
    }

    /// Rebuild network parameters, validating names and shapes against the
    /// declared architecture.
    pub fn network_params<S: Scalar>(&self) -> Result<ModelParams<S>> {
        let SavedModel::Network { arch, entries } = &self.model else {
            return Err(Error::Config(format!(
                "checkpoint for '{}' holds a ridge model, not a network",
                self.predictor
            )));
        };
        let reference: ModelParams<S> = match arch {
            Architecture::Unet(config) => build_cs_sunet(config, 0)?,
            Architecture::PixelNn(config) => build_pixel_nn(config, 0)?,
        };
        if entries.len() != reference.entries().len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, architecture needs {}",
                entries.len(),
                reference.entries().len()
            )));
        }
        let mut rebuilt = Vec::with_capacity(entries.len());
        for (saved, expect) in entries.iter().zip(reference.entries()) {
            if saved.name != expect.name || saved.shape != expect.tensor.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor '{}' {:?} does not match architecture slot '{}' {:?}",
                    saved.name,
                    saved.shape,
                    expect.name,
                    expect.tensor.shape()
                )));
            }
            let data: Vec<S> = saved.data.iter().map(|v| S::from_f64c(*v)).collect();
            let tensor = TensorBase::new(saved.shape.clone(), data)?;
            rebuilt.push(ParamEntry { name: saved.name.clone(), tensor });
        }
        let params = ModelParams::from_entries(arch.clone(), rebuilt);
        if !params.all_finite() {
            return Err(Error::NonFinite(format!(
                "checkpoint for '{}' contains non-finite parameters",
                self.predictor
            )));
        }
        Ok(params)
    }

    /// Rebuild a fitted ridge regressor.
    pub fn ridge_model<S: Scalar>(&self) -> Result<RidgeModel<S>> {
        let SavedModel::Ridge { weights, intercept, alpha } = &self.model else {
            return Err(Error::Config(format!(
                "checkpoint for '{}' holds a network, not a ridge model",
                self.predictor
            )));
        };
        Ok(RidgeModel {
            weights: weights.iter().map(|v| S::from_f64c(*v)).collect(),
            intercept: S::from_f64c(*intercept),
            alpha: *alpha,
        })
    }
}
