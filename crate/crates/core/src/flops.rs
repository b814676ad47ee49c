//! Forward FLOPs from configuration arithmetic alone.
//!
//! Counts GEMM multiply-adds (tokenizer projections, per-position networks
//! including routers and only the activated experts, task and auxiliary
//! heads) and reports `2 * MACs * batch`. Norms, activations, softmax and
//! element-wise work are excluded, the same convention the tape uses.

use alloc::vec::Vec;

use crate::block::{BlockKind, FfnKind, MoeStages};
use crate::error::Result;
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::moe::{ExpertPool, MoeConfig};
use crate::tokenize::{group_count, FeatureSpec};

/// Per-example GEMM multiply-adds split by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacBreakdown {
    pub tokenizer: u64,
    pub networks: u64,
    pub routers: u64,
    pub heads: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.tokenizer + self.networks + self.routers + self.heads
    }
}

/// `(network MACs, router MACs)` of one row through one position network.
fn net_macs(cfg: &ModelConfig, moe: Option<&MoeConfig>, positions: usize, width: u64) -> (u64, u64) {
    let hidden = cfg.expansion as u64 * width;
    match moe {
        None => match cfg.ffn {
            FfnKind::SwiGlu => (3 * width * hidden, 0),
            FfnKind::Relu => (2 * width * hidden, 0),
        },
        Some(m) => {
            let per = hidden / m.experts as u64;
            let net = m.active as u64 * 3 * width * per;
            let pool = match m.pool {
                ExpertPool::Global if !cfg.shared_weights => positions * m.routed_experts(),
                _ => m.routed_experts(),
            };
            let router = if m.routed_active() > 0 { width * pool as u64 } else { 0 };
            (net, router)
        }
    }
}

pub fn macs_per_example(cfg: &ModelConfig, features: &[FeatureSpec]) -> Result<MacBreakdown> {
    cfg.validate()?;
    let groups = group_count(features)?;
    let d = cfg.dim as u64;
    let extra = (cfg.tokenizer_depth as u64 - 1) * d * d;
    let mut out = MacBreakdown::default();
    for g in 0..groups {
        let w: usize = features.iter().filter(|f| f.group == g).map(|f| f.emb_dim).sum();
        out.tokenizer += w as u64 * d + extra;
    }
    if cfg.global_token {
        let total: usize = features.iter().map(|f| f.emb_dim).sum();
        out.tokenizer += total as u64 * d + extra;
    }
    let (mix_moe, rev_moe) = match cfg.moe_stages {
        MoeStages::Both => (true, true),
        MoeStages::Mixing => (true, false),
        MoeStages::Reverting => (false, true),
    };
    let moe_at = |here: bool| cfg.moe.as_ref().filter(|_| here);
    let mut shape = (groups + usize::from(cfg.global_token), cfg.dim);
    let mut widths = alloc::vec![shape.1];
    for _ in 0..cfg.layers {
        let (t, dim) = shape;
        let (p, w) = if cfg.mixing { (cfg.heads, t * dim / cfg.heads) } else { (t, dim) };
        let (n1, r1) = net_macs(cfg, moe_at(mix_moe), p, w as u64);
        out.networks += p as u64 * n1;
        out.routers += p as u64 * r1;
        match cfg.block {
            BlockKind::TokenMixerLarge => {
                let (n2, r2) = net_macs(cfg, moe_at(rev_moe), t, dim as u64);
                out.networks += t as u64 * n2;
                out.routers += t as u64 * r2;
            }
            BlockKind::RankMixer => shape = (p, w),
        }
        widths.push(shape.1);
    }
    out.heads = widths[cfg.layers] as u64 + cfg.aux_sites()?.iter().map(|&l| widths[l] as u64).sum::<u64>();
    Ok(out)
}

/// Analytic forward FLOPs of one batch: `2 * MACs * batch`.
pub fn flops_per_batch(cfg: &ModelConfig, features: &[FeatureSpec], batch: usize) -> Result<u64> {
    Ok(2 * macs_per_example(cfg, features)?.total() * batch as u64)
}

/// FLOPs counted by the tape on one forward pass of a freshly built model over
/// `ids` (`batch` rows).
pub fn measured_flops(cfg: &ModelConfig, features: &[FeatureSpec], ids: &[u32], batch: usize) -> Result<u64> {
    let (model, params) = Model::build::<f64>(features, cfg)?;
    let mut g = Graph::new(&params, false);
    model.forward(&mut g, ids, batch)?;
    Ok(2 * g.tape.macs())
}

/// Relative gap `|analytic - measured| / measured`.
pub fn relative_gap(analytic: u64, measured: u64) -> f64 {
    (analytic as f64 - measured as f64).abs() / (measured as f64).max(1.0)
}

/// Random feature ids for `rows` examples.
pub fn random_ids(features: &[FeatureSpec], rows: usize, seed: u64) -> Vec<u32> {
    use rand::Rng;
    let mut rng = crate::init::rng(seed);
    (0..rows)
        .flat_map(|_| features.iter().map(|f| rng.random_range(0..f.cardinality) as u32).collect::<Vec<_>>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    #[test]
    fn linear_in_batch() {
        let f = SyntheticSpec::default().features();
        let cfg = ModelConfig::default();
        assert_eq!(flops_per_batch(&cfg, &f, 512).unwrap(), 2 * flops_per_batch(&cfg, &f, 256).unwrap());
    }

    #[test]
    fn agrees_with_built_model() {
        let f = SyntheticSpec::default().features();
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                moe: Some(MoeConfig::default()),
                ..ModelConfig::default()
            },
            ModelConfig {
                block: BlockKind::RankMixer,
                interval: 0,
                tokenizer_depth: 2,
                ..ModelConfig::default()
            },
        ] {
            let (model, _) = Model::build::<f32>(&f, &cfg).unwrap();
            assert_eq!(macs_per_example(&cfg, &f).unwrap().total(), model.macs_per_example() as u64);
        }
    }
}
