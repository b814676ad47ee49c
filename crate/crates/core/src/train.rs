//! Training loop, held-out evaluation and run reports.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::flops;
use crate::graph::Graph;
use crate::metrics::{auc, logloss};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adagrad, LearningRates};
use crate::params::ParamStore;
use crate::real::Real;

/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: LearningRates,
    pub batch: usize,
    pub epochs: usize,
    /// Seed of the shuffling stream.
    pub seed: u64,
    /// Evaluate every this many steps in addition to every epoch end; 0 means
    /// epoch ends only.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: LearningRates::default(),
            batch: 256,
            epochs: 1,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.dense >= 0.0 && self.lr.sparse >= 0.0 && self.lr.dense.is_finite() && self.lr.sparse.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    pub logloss: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub fingerprint: String,
    pub trajectory: Vec<EvalPoint>,
    /// Mean training loss (task plus auxiliary) of every epoch.
    pub epoch_losses: Vec<f64>,
    pub final_auc: f64,
    pub final_logloss: f64,
    /// AUC of the planted score on the held-out labels.
    pub oracle_auc: f64,
    pub params_total: usize,
    pub params_activated: usize,
    pub flops_per_batch: u64,
    pub steps: usize,
}

impl RunReport {
    pub fn auc_ratio(&self) -> f64 {
        self.final_auc / self.oracle_auc
    }
}

pub struct Trained<R> {
    pub model: Model,
    pub params: ParamStore<R>,
    pub report: RunReport,
}

/// Stable 64-bit FNV-1a hash of the full run configuration.
pub fn fingerprint(model: &ModelConfig, data: &SyntheticSpec, train: &TrainConfig) -> String {
    let text = format!("{model:?}|{data:?}|{train:?}");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Logits over a whole dataset in fixed-size chunks.
pub fn predict_dataset<R: Real>(model: &Model, params: &ParamStore<R>, data: &Dataset, fp8: bool) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(data.rows());
    let mut start = 0;
    while start < data.rows() {
        let rows = EVAL_CHUNK.min(data.rows() - start);
        let ids = &data.ids[start * data.features..(start + rows) * data.features];
        scores.extend(model.predict(params, ids, rows, fp8)?);
        start += rows;
    }
    Ok(scores)
}

/// `(logloss, auc)` of the model on a dataset.
pub fn evaluate<R: Real>(model: &Model, params: &ParamStore<R>, data: &Dataset, fp8: bool) -> Result<(f64, f64)> {
    let scores = predict_dataset(model, params, data, fp8)?;
    Ok((logloss(&scores, &data.labels), auc(&scores, &data.labels)?))
}

/// Train a freshly built model on the synthetic data.
pub fn train<R: Real>(name: &str, config: &ModelConfig, data: &Synthetic, tc: &TrainConfig) -> Result<Trained<R>> {
    let (model, params) = Model::build::<R>(&data.spec.features(), config)?;
    train_from(name, model, params, data, tc)
}

/// Train an existing model and parameter set.
pub fn train_from<R: Real>(
    name: &str,
    model: Model,
    mut params: ParamStore<R>,
    data: &Synthetic,
    tc: &TrainConfig,
) -> Result<Trained<R>> {
    tc.validate()?;
    let mut opt = Adagrad::new(&params, tc.lr);
    let mut rng = crate::init::rng(tc.seed);
    let mut order: Vec<usize> = (0..data.train.rows()).collect();
    let mut trajectory = Vec::new();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch) {
            let (ids, labels) = data.train.gather(chunk);
            let grads = {
                let mut g = Graph::new(&params, true);
                let out = model.forward(&mut g, &ids, chunk.len())?;
                let loss = model.loss(&mut g, &out, &labels)?;
                let value = g.tape.value(loss).item().f64();
                if !value.is_finite() {
                    let layer_norms = out.layers.iter().map(|&v| g.tape.value(v).l2_norm().f64()).collect();
                    return Err(Error::Diverged { step, layer_norms });
                }
                total += value;
                batches += 1;
                g.param_grads(loss)?
            };
            opt.step(&mut params, &grads)?;
            step += 1;
            if tc.eval_every > 0 && step % tc.eval_every == 0 {
                let (ll, a) = evaluate(&model, &params, &data.eval, false)?;
                trajectory.push(EvalPoint { step, epoch, logloss: ll, auc: a });
            }
        }
        epoch_losses.push(total / batches.max(1) as f64);
        if trajectory.last().map(|p| p.step) != Some(step) {
            let (ll, a) = evaluate(&model, &params, &data.eval, false)?;
            trajectory.push(EvalPoint { step, epoch, logloss: ll, auc: a });
        }
    }
    let (final_logloss, final_auc) = match trajectory.last() {
        Some(p) => (p.logloss, p.auc),
        None => evaluate(&model, &params, &data.eval, false)?,
    };
    let (params_total, params_activated) = model.param_counts(&params);
    let report = RunReport {
        name: name.into(),
        fingerprint: fingerprint(&model.config, &data.spec, tc),
        trajectory,
        epoch_losses,
        final_auc,
        final_logloss,
        oracle_auc: data.eval.oracle_auc()?,
        params_total,
        params_activated,
        flops_per_batch: flops::flops_per_batch(&model.config, &data.spec.features(), tc.batch)?,
        steps: step,
    };
    Ok(Trained { model, params, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn tiny() -> (ModelConfig, Synthetic) {
        let spec = SyntheticSpec {
            groups: 3,
            train_examples: 256,
            eval_examples: 128,
            pairs: 2,
            ..SyntheticSpec::default()
        };
        let cfg = ModelConfig {
            dim: 8,
            heads: 4,
            layers: 2,
            ..ModelConfig::default()
        };
        (cfg, generate(&spec).unwrap())
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (cfg, data) = tiny();
        let tc = TrainConfig {
            lr: LearningRates { dense: 0.0, sparse: 0.0 },
            epochs: 1,
            batch: 64,
            ..TrainConfig::default()
        };
        let (_, initial) = Model::build::<f64>(&data.spec.features(), &cfg).unwrap();
        let run = train::<f64>("zero", &cfg, &data, &tc).unwrap();
        assert_eq!(run.params, initial);
    }

    #[test]
    fn deterministic_report() {
        let (cfg, data) = tiny();
        let tc = TrainConfig {
            epochs: 2,
            batch: 64,
            eval_every: 3,
            ..TrainConfig::default()
        };
        let a = train::<f32>("a", &cfg, &data, &tc).unwrap().report;
        let b = train::<f32>("a", &cfg, &data, &tc).unwrap().report;
        assert_eq!(a, b);
        assert_eq!(a.steps, 8);
        assert_eq!(a.trajectory.iter().map(|p| p.step).collect::<Vec<_>>(), [3, 4, 6, 8]);
    }
}
