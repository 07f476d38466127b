//! JSON checkpoints: weights, model configuration, normalization statistics
//! and the sampling-stream positions at the end of training.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::manifest::ChannelStats;
use crate::error::{io_err, Error, Result};
use crate::nn::ParamStore;
use crate::regression::{RegModelConfig, RegressionModel};
use crate::rng::StreamState;
use crate::scalar::Scalar;
use crate::segmentation::{SegModelConfig, SegmentationModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelSpec {
    Segmentation(SegModelConfig),
    Regression(RegModelConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelSpec,
    /// Weights widened to f64 so either precision can reload them.
    pub params: ParamStore<f64>,
    pub stats: ChannelStats,
    pub seed: u64,
    pub iterations: usize,
    pub rng: Vec<StreamState>,
}

fn widen<T: Scalar>(p: &ParamStore<T>) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for e in p.entries() {
        out.add(e.name.clone(), e.value.cast());
    }
    out
}

fn narrow<T: Scalar>(p: &ParamStore<f64>) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for e in p.entries() {
        out.add(e.name.clone(), e.value.cast());
    }
    out
}

impl Checkpoint {
    pub fn segmentation<T: Scalar>(
        model: &SegmentationModel<T>,
        stats: &ChannelStats,
        seed: u64,
        iterations: usize,
        rng: Vec<StreamState>,
    ) -> Self {
        Self {
            model: ModelSpec::Segmentation(model.config().clone()),
            params: widen(model.params()),
            stats: *stats,
            seed,
            iterations,
            rng,
        }
    }

    pub fn regression<T: Scalar>(
        model: &RegressionModel<T>,
        stats: &ChannelStats,
        seed: u64,
        iterations: usize,
        rng: Vec<StreamState>,
    ) -> Self {
        Self {
            model: ModelSpec::Regression(model.config().clone()),
            params: widen(model.params()),
            stats: *stats,
            seed,
            iterations,
            rng,
        }
    }

    pub fn to_segmentation<T: Scalar>(&self) -> Result<SegmentationModel<T>> {
        match &self.model {
            ModelSpec::Segmentation(c) => {
                SegmentationModel::from_parts(c.clone(), narrow(&self.params))
            }
            ModelSpec::Regression(_) => Err(Error::Contract(
                "checkpoint holds a regression model".into(),
            )),
        }
    }

    pub fn to_regression<T: Scalar>(&self) -> Result<RegressionModel<T>> {
        match &self.model {
            ModelSpec::Regression(c) => {
                RegressionModel::from_parts(c.clone(), narrow(&self.params))
            }
            ModelSpec::Segmentation(_) => Err(Error::Contract(
                "checkpoint holds a segmentation model".into(),
            )),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(io_err(path))
    }

    /// Loads a checkpoint; an absent file is a missing prerequisite.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
