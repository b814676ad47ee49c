//! Paired evaluation of the full-precision and FP8 inference paths.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::auc;
use crate::model::Model;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::EVAL_CHUNK;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Per layer output (entry 0 is the tokenizer), the largest per-example
    /// relative L2 deviation of the FP8 path.
    pub layer_max_rel_dev: Vec<f64>,
    pub score_max_abs_dev: f64,
    pub score_mean_abs_dev: f64,
    pub auc_full: f64,
    pub auc_fp8: f64,
}

impl FidelityReport {
    /// `auc_fp8 - auc_full`.
    pub fn auc_delta(&self) -> f64 {
        self.auc_fp8 - self.auc_full
    }
}

/// Largest per-row `|a - b| / |a|` over the leading axis.
fn max_row_rel_dev<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> f64 {
    let rows = a.shape()[0];
    let width = a.len() / rows.max(1);
    let mut worst: f64 = 0.0;
    for r in 0..rows {
        let (mut num, mut den) = (0.0, 0.0);
        for j in r * width..(r + 1) * width {
            let (x, y) = (a.data()[j].f64(), b.data()[j].f64());
            num += (x - y) * (x - y);
            den += x * x;
        }
        let d = if num == 0.0 { 0.0 } else { libm::sqrt(num) / libm::sqrt(den).max(1e-300) };
        worst = worst.max(d);
    }
    worst
}

/// Run both paths over `data` and compare layer outputs, scores and AUC.
pub fn compare<R: Real>(model: &Model, params: &ParamStore<R>, data: &Dataset) -> Result<FidelityReport> {
    if params.iter().any(|(_, p)| p.value.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { op: "fp8 fidelity: parameters" });
    }
    let mut layer_dev = alloc::vec![0.0; model.blocks.len() + 1];
    let (mut full, mut quant) = (Vec::with_capacity(data.rows()), Vec::with_capacity(data.rows()));
    let mut start = 0;
    while start < data.rows() {
        let rows = EVAL_CHUNK.min(data.rows() - start);
        let ids = &data.ids[start * data.features..(start + rows) * data.features];
        let mut gf = Graph::new(params, false);
        let of = model.forward(&mut gf, ids, rows)?;
        let mut gq = Graph::new(params, false).with_fp8(true);
        let oq = model.forward(&mut gq, ids, rows)?;
        for (l, (&a, &b)) in of.layers.iter().zip(&oq.layers).enumerate() {
            layer_dev[l] = f64::max(layer_dev[l], max_row_rel_dev(gf.tape.value(a), gq.tape.value(b)));
        }
        full.extend(gf.tape.value(of.logits).to_f64_vec());
        quant.extend(gq.tape.value(oq.logits).to_f64_vec());
        start += rows;
    }
    let devs: Vec<f64> = full.iter().zip(&quant).map(|(a, b)| (a - b).abs()).collect();
    Ok(FidelityReport {
        layer_max_rel_dev: layer_dev,
        score_max_abs_dev: devs.iter().copied().fold(0.0, f64::max),
        score_mean_abs_dev: devs.iter().sum::<f64>() / devs.len().max(1) as f64,
        auc_full: auc(&full, &data.labels)?,
        auc_fp8: auc(&quant, &data.labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::model::ModelConfig;

    fn setup() -> (Model, ParamStore<f64>, Dataset) {
        let spec = SyntheticSpec {
            groups: 3,
            train_examples: 16,
            eval_examples: 256,
            pairs: 2,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).unwrap();
        let cfg = ModelConfig {
            dim: 8,
            heads: 4,
            layers: 2,
            ..ModelConfig::default()
        };
        let (m, p) = Model::build::<f64>(&spec.features(), &cfg).unwrap();
        (m, p, data.eval)
    }

    #[test]
    fn zero_weights_give_identical_constant_scores() {
        let (m, mut p, data) = setup();
        for q in p.iter_mut() {
            q.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let r = compare(&m, &p, &data).unwrap();
        assert_eq!(r.score_max_abs_dev, 0.0);
        let s = m.predict(&p, &data.ids, data.rows(), true).unwrap();
        assert!(s.iter().all(|&v| v == s[0]));
    }

    #[test]
    fn disabled_flag_is_bit_identical() {
        let (m, p, data) = setup();
        let mut g = Graph::new(&p, false).with_fp8(false);
        let out = m.forward(&mut g, &data.ids, data.rows()).unwrap();
        let off = g.tape.value(out.logits).to_f64_vec();
        assert_eq!(off, m.predict(&p, &data.ids, data.rows(), false).unwrap());
    }

    #[test]
    fn deviation_is_small_but_present() {
        let (m, p, data) = setup();
        let r = compare(&m, &p, &data).unwrap();
        assert_eq!(r.layer_max_rel_dev.len(), 3);
        assert!(r.layer_max_rel_dev[1] > 0.0 && r.layer_max_rel_dev[1] < 0.2, "{r:?}");
    }
}
