//! JSON checkpoints: configuration plus every parameter tensor by name.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use tokenmixer_core::data::SyntheticSpec;
use tokenmixer_core::model::{Model, ModelConfig};
use tokenmixer_core::params::ParamStore;
use tokenmixer_core::train::{RunReport, TrainConfig};
use tokenmixer_core::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub params: Vec<SavedParam>,
    pub report: Option<RunReport>,
}

impl Checkpoint {
    pub fn capture<R: Real>(
        model: &Model,
        params: &ParamStore<R>,
        data: &SyntheticSpec,
        train: &TrainConfig,
        report: Option<RunReport>,
    ) -> Self {
        Checkpoint {
            model: model.config.clone(),
            data: data.clone(),
            train: train.clone(),
            params: params
                .iter()
                .map(|(_, p)| SavedParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.to_f64_vec(),
                })
                .collect(),
            report,
        }
    }

    /// Rebuild the model and load every saved tensor into it.
    pub fn restore<R: Real>(&self) -> Result<(Model, ParamStore<R>)> {
        let (model, mut params) = Model::build::<R>(&self.data.features(), &self.model)?;
        ensure!(
            params.len() == self.params.len(),
            "checkpoint has {} tensors, the configured model {}",
            self.params.len(),
            params.len()
        );
        for saved in &self.params {
            let Some(id) = params.find(&saved.name) else {
                bail!("checkpoint tensor `{}` does not exist in the model", saved.name);
            };
            let slot = &mut params.get_mut(id).value;
            ensure!(
                slot.shape() == saved.shape.as_slice(),
                "tensor `{}`: checkpoint shape {:?}, model shape {:?}",
                saved.name,
                saved.shape,
                slot.shape()
            );
            *slot = Tensor::from_f64(saved.shape.clone(), &saved.values)?;
        }
        Ok((model, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).context("serializing checkpoint")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restores_identical_parameters() {
        let data = SyntheticSpec {
            groups: 3,
            pairs: 2,
            ..SyntheticSpec::default()
        };
        let cfg = ModelConfig {
            dim: 8,
            heads: 4,
            layers: 2,
            seed: 5,
            ..ModelConfig::default()
        };
        let (m, p) = Model::build::<f32>(&data.features(), &cfg).unwrap();
        let ck = Checkpoint::capture(&m, &p, &data, &TrainConfig::default(), None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let (m2, p2) = back.restore::<f32>().unwrap();
        assert_eq!(m2.config, m.config);
        assert_eq!(p2, p);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let data = SyntheticSpec {
            groups: 3,
            pairs: 2,
            ..SyntheticSpec::default()
        };
        let (m, p) = Model::build::<f64>(&data.features(), &ModelConfig::default()).unwrap();
        let mut ck = Checkpoint::capture(&m, &p, &data, &TrainConfig::default(), None);
        ck.model.dim = 32;
        assert!(ck.restore::<f64>().is_err());
    }
}
