//! Mixing/reverting blocks and the RankMixer baseline block.
//!
//! Activations are batch-major `[B, P, W]`: `P` positions of width `W`.
//! Every position owns its network, applied to the `[B, W]` slice of that
//! position.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init::InitScales;
use crate::mixing::{MixConfig, MixLayout};
use crate::moe::{init_global_pool, ExpertPool, MoeConfig, MoeNet, Routing};
use crate::norm::NormPlacement;
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::real::Real;
use crate::swiglu::{Ffn, SwiGlu};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Mix, per-position network, revert, per-token network; the second
    /// residual adds the block input.
    #[default]
    TokenMixerLarge,
    /// `norm(F(mix(X)) + mix(X))`, emitting `H` tokens.
    RankMixer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FfnKind {
    #[default]
    SwiGlu,
    /// Two-layer ReLU network.
    Relu,
}

/// Which stages use the sparse MoE when one is configured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoeStages {
    #[default]
    Both,
    Mixing,
    Reverting,
}

/// How the per-position networks of one stage are built.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub ffn: FfnKind,
    pub expansion: usize,
    pub moe: Option<MoeConfig>,
    /// One network reused by every position.
    pub shared_weights: bool,
    pub init: InitScales,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PositionNet {
    SwiGlu(SwiGlu),
    Ffn(Ffn),
    Moe(MoeNet),
}

impl PositionNet {
    /// `x: [m, W]`; the input is an FP8 quantization point.
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<(Var, Option<Routing>)> {
        let x = g.quant_point(x)?;
        match self {
            PositionNet::SwiGlu(n) => Ok((n.forward(g, x)?, None)),
            PositionNet::Ffn(n) => Ok((n.forward(g, x)?, None)),
            PositionNet::Moe(n) => n.forward(g, x),
        }
    }

    pub fn macs_per_row(&self) -> usize {
        match self {
            PositionNet::SwiGlu(n) => n.macs_per_row(),
            PositionNet::Ffn(n) => n.macs_per_row(),
            PositionNet::Moe(n) => n.macs_per_row(),
        }
    }
}

/// Routing decision of one MoE position inside the model.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteRecord {
    pub layer: usize,
    /// 0 for the mixing stage, 1 for the reverting stage.
    pub stage: usize,
    pub position: usize,
    pub routing: Routing,
}

/// Per-position networks with their norm sites and residual switch.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub positions: usize,
    pub width: usize,
    pub nets: Vec<PositionNet>,
    pub norm_in: Option<ParamId>,
    pub norm_out: Option<ParamId>,
    pub residual: bool,
    pub eps: f64,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        prefix: &str,
        positions: usize,
        width: usize,
        spec: &NetSpec,
        norm: NormPlacement,
        residual: bool,
        eps: f64,
    ) -> Result<Self> {
        let hidden = spec.expansion * width;
        let count = if spec.shared_weights { 1 } else { positions };
        let nets = match (&spec.moe, spec.ffn) {
            (Some(moe), _) if moe.pool == ExpertPool::Global && !spec.shared_weights => {
                init_global_pool(store, rng, prefix, positions, width, hidden, moe, spec.init)?
                    .into_iter()
                    .map(PositionNet::Moe)
                    .collect()
            }
            (Some(moe), _) => (0..count)
                .map(|p| {
                    MoeNet::init(store, rng, &format!("{prefix}.pos{p}"), width, hidden, moe, spec.init)
                        .map(PositionNet::Moe)
                })
                .collect::<Result<_>>()?,
            (None, FfnKind::SwiGlu) => (0..count)
                .map(|p| {
                    PositionNet::SwiGlu(SwiGlu::init(store, rng, &format!("{prefix}.pos{p}"), width, hidden, spec.init))
                })
                .collect(),
            (None, FfnKind::Relu) => (0..count)
                .map(|p| PositionNet::Ffn(Ffn::init(store, rng, &format!("{prefix}.pos{p}"), width, hidden, spec.init)))
                .collect(),
        };
        let mut gain = |site: &str| {
            store.push(
                format!("{prefix}.{site}"),
                ParamRole::NormGain,
                Tensor::full([width], R::one()),
            )
        };
        let norm_in = norm.inner().then(|| gain("norm_in"));
        let norm_out = norm.outer().then(|| gain("norm_out"));
        Ok(Stage {
            positions,
            width,
            nets,
            norm_in,
            norm_out,
            residual,
            eps,
        })
    }

    fn net(&self, position: usize) -> &PositionNet {
        if self.nets.len() == 1 {
            &self.nets[0]
        } else {
            &self.nets[position]
        }
    }

    /// Optional input norm then the per-position networks, for the `[B, p, W]`
    /// slab of positions `first..first + p`.
    pub fn inner<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        x: Var,
        first: usize,
        routes: &mut Vec<(usize, Routing)>,
    ) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.width || first + shape[1] > self.positions {
            return Err(crate::error::shape_err(
                "stage",
                format!(
                    "{shape:?} at position {first} for {} positions of width {}",
                    self.positions, self.width
                ),
            ));
        }
        let (b, p) = (shape[0], shape[1]);
        let x = match self.norm_in {
            Some(gain) => {
                let gain = g.param(gain)?;
                g.tape.rmsnorm(x, gain, self.eps)?
            }
            None => x,
        };
        if self.nets.len() == 1 {
            let flat = g.tape.reshape(x, &[b * p, self.width])?;
            let (y, r) = self.nets[0].forward(g, flat)?;
            if let Some(r) = r {
                routes.push((0, r));
            }
            return g.tape.reshape(y, &[b, p, self.width]);
        }
        let mut outs = Vec::with_capacity(p);
        for i in 0..p {
            let xi = if p == 1 { x } else { g.tape.slice(x, 1, i, 1)? };
            let xi = g.tape.reshape(xi, &[b, self.width])?;
            let (yi, r) = self.net(first + i).forward(g, xi)?;
            if let Some(r) = r {
                routes.push((first + i, r));
            }
            outs.push(g.tape.reshape(yi, &[b, 1, self.width])?);
        }
        g.tape.concat(&outs, 1)
    }

    /// Residual addition (when enabled) followed by the optional output norm.
    pub fn combine<R: Real>(&self, g: &mut Graph<'_, R>, residual: Var, f: Var) -> Result<Var> {
        let y = if self.residual { g.tape.add(residual, f)? } else { f };
        match self.norm_out {
            Some(gain) => {
                let gain = g.param(gain)?;
                g.tape.rmsnorm(y, gain, self.eps)
            }
            None => Ok(y),
        }
    }

    pub fn apply<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        x: Var,
        residual: Var,
        routes: &mut Vec<(usize, Routing)>,
    ) -> Result<Var> {
        let f = self.inner(g, x, 0, routes)?;
        self.combine(g, residual, f)
    }

    /// Forward GEMM multiply-adds per example.
    pub fn macs_per_example(&self) -> usize {
        (0..self.positions).map(|p| self.net(p).macs_per_row()).sum()
    }

    pub fn moe_nets(&self) -> impl Iterator<Item = &MoeNet> {
        self.nets.iter().filter_map(|n| match n {
            PositionNet::Moe(m) => Some(m),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    /// `None` when mixing and reverting are disabled.
    pub layout: Option<MixLayout>,
    pub stage1: Stage,
    pub stage2: Option<Stage>,
    pub tokens_in: usize,
    pub dim_in: usize,
}

/// Everything needed to build one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub tokens: usize,
    pub dim: usize,
    /// `None` disables mixing and reverting.
    pub mix: Option<MixConfig>,
    pub norm: NormPlacement,
    pub residual: bool,
    pub eps: f64,
    pub mixing_net: NetSpec,
    pub reverting_net: NetSpec,
}

impl Block {
    pub fn init<R: Real>(store: &mut ParamStore<R>, rng: &mut impl Rng, prefix: &str, spec: &BlockSpec) -> Result<Self> {
        let layout = match &spec.mix {
            Some(cfg) => Some(MixLayout::new(spec.tokens, spec.dim, cfg)?),
            None => None,
        };
        let (positions, width) = match &layout {
            Some(l) => (l.heads(), l.width()),
            None => (spec.tokens, spec.dim),
        };
        match spec.kind {
            BlockKind::TokenMixerLarge => {
                let stage1 = Stage::init(
                    store,
                    rng,
                    &format!("{prefix}.mixing"),
                    positions,
                    width,
                    &spec.mixing_net,
                    spec.norm,
                    spec.residual,
                    spec.eps,
                )?;
                let stage2 = Stage::init(
                    store,
                    rng,
                    &format!("{prefix}.reverting"),
                    spec.tokens,
                    spec.dim,
                    &spec.reverting_net,
                    spec.norm,
                    spec.residual,
                    spec.eps,
                )?;
                Ok(Block {
                    kind: spec.kind,
                    layout,
                    stage1,
                    stage2: Some(stage2),
                    tokens_in: spec.tokens,
                    dim_in: spec.dim,
                })
            }
            BlockKind::RankMixer => {
                if layout.is_none() {
                    return Err(Error::Config("the RankMixer block needs mixing".into()));
                }
                let stage1 = Stage::init(
                    store,
                    rng,
                    &format!("{prefix}.mixing"),
                    positions,
                    width,
                    &spec.mixing_net,
                    NormPlacement::Post,
                    spec.residual,
                    spec.eps,
                )?;
                Ok(Block {
                    kind: spec.kind,
                    layout,
                    stage1,
                    stage2: None,
                    tokens_in: spec.tokens,
                    dim_in: spec.dim,
                })
            }
        }
    }

    /// `(tokens, dim)` of the output.
    pub fn output_shape(&self) -> (usize, usize) {
        match self.kind {
            BlockKind::TokenMixerLarge => (self.tokens_in, self.dim_in),
            BlockKind::RankMixer => (self.stage1.positions, self.stage1.width),
        }
    }

    /// `[B, T, D] -> [B, T, D]` (or `[B, H, T*D/H]` for RankMixer).
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var, layer: usize, trace: &mut Vec<RouteRecord>) -> Result<Var> {
        let shape = g.tape.shape(x);
        if shape.len() != 3 || shape[1] != self.tokens_in || shape[2] != self.dim_in {
            return Err(crate::error::shape_err(
                "block",
                format!("expected [B, {}, {}], got {shape:?}", self.tokens_in, self.dim_in),
            ));
        }
        let mut routes = Vec::new();
        let m = match &self.layout {
            Some(l) => l.mix(&mut g.tape, x)?,
            None => x,
        };
        let f1 = self.stage1.inner(g, m, 0, &mut routes)?;
        let h = self.stage1.combine(g, m, f1)?;
        record(trace, layer, 0, &mut routes);
        let Some(stage2) = &self.stage2 else {
            return Ok(h);
        };
        let r = match &self.layout {
            Some(l) => l.revert(&mut g.tape, h)?,
            None => h,
        };
        let f2 = stage2.inner(g, r, 0, &mut routes)?;
        let out = stage2.combine(g, x, f2)?;
        record(trace, layer, 1, &mut routes);
        Ok(out)
    }

    pub fn macs_per_example(&self) -> usize {
        self.stage1.macs_per_example() + self.stage2.as_ref().map_or(0, Stage::macs_per_example)
    }

    pub fn stages(&self) -> impl Iterator<Item = &Stage> {
        core::iter::once(&self.stage1).chain(self.stage2.as_ref())
    }
}

fn record(trace: &mut Vec<RouteRecord>, layer: usize, stage: usize, routes: &mut Vec<(usize, Routing)>) {
    trace.extend(routes.drain(..).map(|(position, routing)| RouteRecord {
        layer,
        stage,
        position,
        routing,
    }));
}

/// Fill every down kernel with zeros, making pre-norm residual blocks exact
/// identities.
pub fn zero_down_kernels<R: Real>(store: &mut ParamStore<R>) {
    for p in store.iter_mut() {
        if p.role == ParamRole::Down {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }
}

/// Redraw every Up/Gate/Down kernel as Xavier normal with per-role scales.
/// A zero scale yields a zero kernel.
pub fn small_init<R: Real>(store: &mut ParamStore<R>, scales: InitScales, rng: &mut impl Rng) {
    for p in store.iter_mut() {
        let scale = match p.role {
            ParamRole::Up => scales.up,
            ParamRole::Gate => scales.gate,
            ParamRole::Down => scales.down,
            _ => continue,
        };
        let (n_in, n_out) = (p.value.shape()[0], p.value.shape()[1]);
        p.value = crate::init::xavier_normal(rng, n_in, n_out, scale);
    }
}

/// Relative change `|out - in| / |in|` over a batch.
pub fn relative_perturbation<R: Real>(input: &Tensor<R>, output: &Tensor<R>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in input.data().iter().zip(output.data()) {
        let d = b.f64() - a.f64();
        num += d * d;
        den += a.f64() * a.f64();
    }
    libm::sqrt(num) / libm::sqrt(den).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::MixStrategy;
    use alloc::vec;

    pub(crate) fn spec(kind: BlockKind, tokens: usize, dim: usize, heads: usize) -> BlockSpec {
        let net = NetSpec {
            ffn: FfnKind::SwiGlu,
            expansion: 1,
            moe: None,
            shared_weights: false,
            init: InitScales::BASE,
        };
        BlockSpec {
            kind,
            tokens,
            dim,
            mix: Some(MixConfig::new(heads, MixStrategy::Vertical)),
            norm: NormPlacement::Pre,
            residual: true,
            eps: 1e-6,
            mixing_net: net.clone(),
            reverting_net: net,
        }
    }

    fn run(block: &Block, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new(store, false);
        let xv = g.tape.constant(x.clone());
        let y = block.forward(&mut g, xv, 0, &mut Vec::new()).unwrap();
        g.tape.value(y).clone()
    }

    #[test]
    fn zero_down_pre_norm_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::init::rng(2);
        let block = Block::init(&mut store, &mut rng, "b", &spec(BlockKind::TokenMixerLarge, 3, 4, 2)).unwrap();
        zero_down_kernels(&mut store);
        let x = crate::init::normal([5, 3, 4], 1.0, &mut rng);
        assert_eq!(run(&block, &store, &x), x);
    }

    #[test]
    fn output_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::init::rng(2);
        let tml = Block::init(&mut store, &mut rng, "a", &spec(BlockKind::TokenMixerLarge, 4, 6, 3)).unwrap();
        let rm = Block::init(&mut store, &mut rng, "b", &spec(BlockKind::RankMixer, 4, 6, 2)).unwrap();
        let x = crate::init::normal([2, 4, 6], 1.0, &mut rng);
        assert_eq!(run(&tml, &store, &x).shape(), &[2, 4, 6]);
        assert_eq!(run(&rm, &store, &x).shape(), &[2, 2, 12]);
    }

    #[test]
    fn rankmixer_zero_weights_normalizes_mixed_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::init::rng(4);
        let s = spec(BlockKind::RankMixer, 3, 6, 3);
        let block = Block::init(&mut store, &mut rng, "b", &s).unwrap();
        zero_down_kernels(&mut store);
        let x = crate::init::normal([2, 3, 6], 1.0, &mut rng);
        let m = crate::mixing::mix(&x, s.mix.as_ref().unwrap()).unwrap();
        let ones = vec![1.0; 6];
        let expect: Vec<f64> = m
            .data()
            .chunks(6)
            .flat_map(|row| crate::norm::rmsnorm(row, &ones, 1e-6))
            .collect();
        let y = run(&block, &store, &x);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn small_init_statistics() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::init::rng(9);
        let mut s = spec(BlockKind::TokenMixerLarge, 4, 64, 4);
        s.mixing_net.expansion = 2;
        s.reverting_net.expansion = 2;
        Block::init(&mut store, &mut rng, "b", &s).unwrap();
        small_init(&mut store, InitScales::SMALL_DOWN, &mut rng);
        // reverting-stage down kernels are [128, 64]
        let mut sum2 = 0.0;
        let mut n = 0usize;
        for (_, p) in store.iter().filter(|(_, p)| p.role == ParamRole::Down && p.value.shape() == [128, 64]) {
            sum2 += p.value.data().iter().map(|v| v * v).sum::<f64>();
            n += p.value.len();
        }
        assert!(n >= 10_000);
        let std = libm::sqrt(sum2 / n as f64);
        let expect = libm::sqrt(2.0 * 0.01 / (128.0 + 64.0));
        assert!((std / expect - 1.0).abs() < 0.1, "std {std} vs {expect}");
    }
}
