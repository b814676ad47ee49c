//! The full ranking model: tokenizer, `L` blocks with interval residuals,
//! mean pooling, a task head and auxiliary heads.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::block::{Block, BlockKind, BlockSpec, FfnKind, MoeStages, NetSpec, RouteRecord};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init::{rng, xavier_normal, InitScales};
use crate::mixing::{MixConfig, MixStrategy};
use crate::moe::{split_swiglu, MoeConfig};
use crate::norm::{NormPlacement, DEFAULT_EPS};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::tokenize::{mean_pool, FeatureSpec, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width `D`.
    pub dim: usize,
    /// Mixed positions `H`.
    pub heads: usize,
    pub strategy: MixStrategy,
    pub mix_seed: u64,
    /// Hidden expansion `n` of every per-position network.
    pub expansion: usize,
    pub layers: usize,
    /// Interval `k` of the inter-layer residuals; 0 disables them.
    pub interval: usize,
    /// Weight of the auxiliary losses.
    pub aux_weight: f64,
    /// Layers (1-based) carrying an auxiliary head. Defaults to the layers
    /// where interval residuals land.
    pub aux_layers: Option<Vec<usize>>,
    pub norm: NormPlacement,
    pub eps: f64,
    pub block: BlockKind,
    pub global_token: bool,
    pub mixing: bool,
    pub residual: bool,
    pub ffn: FfnKind,
    /// One network shared by every position of a stage.
    pub shared_weights: bool,
    pub moe: Option<MoeConfig>,
    pub moe_stages: MoeStages,
    pub init: InitScales,
    /// 1 or 2 linear layers per group projection.
    pub tokenizer_depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 8,
            strategy: MixStrategy::Vertical,
            mix_seed: 0,
            expansion: 2,
            layers: 4,
            interval: 2,
            aux_weight: 0.1,
            aux_layers: None,
            norm: NormPlacement::Pre,
            eps: DEFAULT_EPS,
            block: BlockKind::TokenMixerLarge,
            global_token: true,
            mixing: true,
            residual: true,
            ffn: FfnKind::SwiGlu,
            shared_weights: false,
            moe: None,
            moe_stages: MoeStages::Both,
            init: InitScales::SMALL_DOWN,
            tokenizer_depth: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn mix(&self) -> MixConfig {
        MixConfig {
            heads: self.heads,
            strategy: self.strategy,
            seed: self.mix_seed,
        }
    }

    pub fn junctions(&self) -> Vec<(usize, usize)> {
        junctions(self.layers, self.interval)
    }

    /// Validated auxiliary head layers.
    pub fn aux_sites(&self) -> Result<Vec<usize>> {
        let sites = match &self.aux_layers {
            Some(s) => s.clone(),
            None => self.junctions().iter().map(|&(_, to)| to).collect(),
        };
        for &s in &sites {
            if s == 0 || s >= self.layers {
                return Err(Error::Config(format!(
                    "auxiliary head at layer {s}: sites must lie in 1..{} (the final layer has the task head)",
                    self.layers
                )));
            }
        }
        let unique: BTreeSet<usize> = sites.iter().copied().collect();
        Ok(unique.into_iter().collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.expansion == 0 {
            return bad("dim, heads, layers and expansion must be positive".into());
        }
        if self.interval == 1 {
            return bad("interval residual spacing must be 0 (off) or at least 2".into());
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return bad(format!("aux_weight {} must be finite and non-negative", self.aux_weight));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("norm eps must be positive".into());
        }
        if !(1..=2).contains(&self.tokenizer_depth) {
            return bad("tokenizer_depth must be 1 or 2".into());
        }
        if self.block == BlockKind::RankMixer && !self.mixing {
            return bad("the RankMixer block needs mixing".into());
        }
        if let Some(m) = &self.moe {
            m.validate()?;
        }
        self.aux_sites()?;
        Ok(())
    }
}

/// Interval residual junctions `(from, to)` over layer outputs, where
/// output 0 is the tokenizer output: from `s = 0, k, 2k, ...` to `s + k`,
/// keeping only junctions that land strictly before the final layer.
pub fn junctions(layers: usize, interval: usize) -> Vec<(usize, usize)> {
    if interval == 0 {
        return Vec::new();
    }
    (0..)
        .map(|i| i * interval)
        .map(|s| (s, s + interval))
        .take_while(|&(_, to)| to < layers)
        .collect()
}

/// RMSNorm over pooled tokens followed by a linear logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub gain: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl Head {
    fn init<R: Real>(store: &mut ParamStore<R>, rng: &mut impl rand::Rng, name: &str, width: usize) -> Self {
        Head {
            gain: store.push(format!("{name}.norm"), ParamRole::NormGain, Tensor::full([width], R::one())),
            weight: store.push(format!("{name}.weight"), ParamRole::Head, xavier_normal(rng, width, 1, 1.0)),
            bias: store.push(format!("{name}.bias"), ParamRole::HeadBias, Tensor::zeros([1])),
            width,
        }
    }

    /// `[B, P, W]` tokens to `[B]` logits.
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, tokens: Var, eps: f64) -> Result<Var> {
        let rows = g.tape.shape(tokens)[0];
        let pooled = mean_pool(g, tokens)?;
        let gain = g.param(self.gain)?;
        let pooled = g.tape.rmsnorm(pooled, gain, eps)?;
        let w = g.param(self.weight)?;
        let z = g.tape.matmul(pooled, w)?;
        let b = g.param(self.bias)?;
        let z = g.tape.add_bias(z, b)?;
        g.tape.reshape(z, &[rows])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub blocks: Vec<Block>,
    pub head: Head,
    pub aux_heads: Vec<(usize, Head)>,
    pub junctions: Vec<(usize, usize)>,
}

/// Result of one forward pass.
pub struct ModelOutput {
    pub logits: Var,
    pub aux_logits: Vec<Var>,
    /// Output of every layer; entry 0 is the tokenizer output.
    pub layers: Vec<Var>,
    pub routes: Vec<RouteRecord>,
}

impl ModelOutput {
    pub fn tokens(&self) -> Var {
        *self.layers.last().expect("at least the input layer")
    }
}

impl Model {
    /// Architecture and freshly initialized parameters, seeded by `config.seed`.
    pub fn build<R: Real>(features: &[FeatureSpec], config: &ModelConfig) -> Result<(Model, ParamStore<R>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng(config.seed);
        let tokenizer = Tokenizer::init(
            &mut store,
            &mut rng,
            features,
            config.dim,
            config.tokenizer_depth,
            config.global_token,
        )?;
        let net = |moe_here: bool| NetSpec {
            ffn: config.ffn,
            expansion: config.expansion,
            moe: config.moe.clone().filter(|_| moe_here),
            shared_weights: config.shared_weights,
            init: config.init,
        };
        let (mix_moe, rev_moe) = match config.moe_stages {
            MoeStages::Both => (true, true),
            MoeStages::Mixing => (true, false),
            MoeStages::Reverting => (false, true),
        };
        let (mut tokens, mut dim) = (tokenizer.tokens(), config.dim);
        let mut shapes = alloc::vec![(tokens, dim)];
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let spec = BlockSpec {
                kind: config.block,
                tokens,
                dim,
                mix: config.mixing.then(|| config.mix()),
                norm: config.norm,
                residual: config.residual,
                eps: config.eps,
                mixing_net: net(mix_moe),
                reverting_net: net(rev_moe),
            };
            let block = Block::init(&mut store, &mut rng, &format!("layer{}", l + 1), &spec)?;
            (tokens, dim) = block.output_shape();
            shapes.push((tokens, dim));
            blocks.push(block);
        }
        let junctions = config.junctions();
        for &(from, to) in &junctions {
            if shapes[from] != shapes[to] {
                return Err(Error::Config(format!(
                    "interval residual {from} -> {to} joins token shapes {:?} and {:?}",
                    shapes[from], shapes[to]
                )));
            }
        }
        let head = Head::init(&mut store, &mut rng, "head", dim);
        let aux_heads = config
            .aux_sites()?
            .into_iter()
            .map(|l| (l, Head::init(&mut store, &mut rng, &format!("aux{l}"), shapes[l].1)))
            .collect();
        Ok((
            Model {
                config: config.clone(),
                tokenizer,
                blocks,
                head,
                aux_heads,
                junctions,
            },
            store,
        ))
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, ids: &[u32], rows: usize) -> Result<ModelOutput> {
        let x = self.tokenizer.forward(g, ids, rows)?;
        self.forward_tokens(g, x)
    }

    /// Everything after the tokenizer, starting from a `[B, T, D]` token matrix.
    pub fn forward_tokens<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<ModelOutput> {
        let mut layers = alloc::vec![x];
        let mut routes = Vec::new();
        let mut h = x;
        for (l, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, h, l + 1, &mut routes)?;
            for &(from, to) in &self.junctions {
                if to == l + 1 {
                    h = g.tape.add(h, layers[from])?;
                }
            }
            layers.push(h);
        }
        let eps = self.config.eps;
        let logits = self.head.forward(g, h, eps)?;
        let aux_logits = self
            .aux_heads
            .iter()
            .map(|(l, head)| head.forward(g, layers[*l], eps))
            .collect::<Result<_>>()?;
        Ok(ModelOutput {
            logits,
            aux_logits,
            layers,
            routes,
        })
    }

    /// `BCE(final) + aux_weight * sum(BCE(aux))`.
    pub fn loss<R: Real>(&self, g: &mut Graph<'_, R>, out: &ModelOutput, labels: &[f64]) -> Result<Var> {
        let labels: Arc<[f64]> = labels.into();
        let mut loss = g.tape.bce(out.logits, labels.clone())?;
        for &z in &out.aux_logits {
            let aux = g.tape.bce(z, labels.clone())?;
            let aux = g.tape.scale(aux, self.config.aux_weight)?;
            loss = g.tape.add(loss, aux)?;
        }
        Ok(loss)
    }

    /// Logits for a batch, optionally on the FP8 inference path.
    pub fn predict<R: Real>(&self, params: &ParamStore<R>, ids: &[u32], rows: usize, fp8: bool) -> Result<Vec<f64>> {
        let mut g = Graph::new(params, false).with_fp8(fp8);
        let out = self.forward(&mut g, ids, rows)?;
        Ok(g.tape.value(out.logits).to_f64_vec())
    }

    pub fn tokens(&self) -> usize {
        self.tokenizer.tokens()
    }

    /// `(total, activated per example)` parameter counts.
    pub fn param_counts<R: Real>(&self, params: &ParamStore<R>) -> (usize, usize) {
        let total = params.scalar_count(|_| true);
        let mut inactive = 0;
        for stage in self.blocks.iter().flat_map(Block::stages) {
            let mut seen = BTreeSet::new();
            let mut routed = 0;
            let mut used = 0;
            for m in stage.moe_nets() {
                let per = m.experts.first().map_or(0, |e| e.param_count());
                for e in &m.experts {
                    if seen.insert(e.up) {
                        routed += per;
                    }
                }
                used += m.k * per;
            }
            inactive += routed.saturating_sub(used);
        }
        (total, total - inactive)
    }

    /// Forward GEMM multiply-adds per example.
    pub fn macs_per_example(&self) -> usize {
        let blocks: usize = self.blocks.iter().map(Block::macs_per_example).sum();
        let heads = self.head.width + self.aux_heads.iter().map(|(_, h)| h.width).sum::<usize>();
        self.tokenizer.macs_per_row() + blocks + heads
    }

    /// Convert every per-position SwiGLU into a split MoE bank in place
    /// (expert `j` gets hidden slab `j`, the last slab is the shared expert,
    /// routers start at zero). Stages already holding other networks are left
    /// untouched. Returns the new parameter store.
    pub fn split_to_moe<R: Real>(&self, params: &ParamStore<R>, cfg: &MoeConfig) -> Result<(Model, ParamStore<R>)> {
        use crate::block::PositionNet;
        let mut store = params.clone();
        let mut model = self.clone();
        for (l, block) in model.blocks.iter_mut().enumerate() {
            let mut stages: Vec<&mut crate::block::Stage> = alloc::vec![&mut block.stage1];
            if let Some(s) = block.stage2.as_mut() {
                stages.push(s);
            }
            for (si, stage) in stages.into_iter().enumerate() {
                for (p, net) in stage.nets.iter_mut().enumerate() {
                    if let PositionNet::SwiGlu(dense) = net {
                        let prefix = format!("layer{}.stage{si}.pos{p}.split", l + 1);
                        *net = PositionNet::Moe(split_swiglu(&mut store, dense, &prefix, cfg)?);
                    }
                }
            }
        }
        model.config.moe = Some(cfg.clone());
        model.config.moe_stages = MoeStages::Both;
        Ok((model, store))
    }
}
