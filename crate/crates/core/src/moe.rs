//! Sparse per-token mixture of experts.
//!
//! Each position owns a bank of SwiGLU experts, a router over the routed
//! experts and optionally one always-on shared expert:
//! `y = alpha * sum_{i in topk} g_i * E_i(x) + S(x)` with `g` the softmax over
//! the selected router scores only.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init::{xavier_normal, InitScales};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::real::Real;
use crate::swiglu::SwiGlu;
use crate::tape::{top_k_indices, Var};
use crate::tensor::Tensor;

/// Gate value scale: a fixed constant or `experts / active`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    Fixed(f64),
    #[default]
    #[serde(with = "auto_tag")]
    Auto,
}

mod auto_tag {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = <&str>::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(de::Error::custom("expected \"auto\" or a number"))
        }
    }
}

/// Whether each position owns its experts or all positions of a stage draw
/// from one pool through one router.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertPool {
    #[default]
    PerToken,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    /// Total experts per position, shared expert included.
    pub experts: usize,
    /// Experts active per token, shared expert included.
    pub active: usize,
    pub shared: bool,
    pub alpha: Alpha,
    /// Multiplies the down-kernel init scale of routed experts.
    pub init_gain: f64,
    pub pool: ExpertPool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig::sparsity(2).expect("1:2 preset")
    }
}

impl MoeConfig {
    /// Presets with one shared expert: 1:2 = 4 experts / 2 active,
    /// 1:4 = 8 / 2, 1:8 = 16 / 2.
    pub fn sparsity(ratio: usize) -> Result<Self> {
        let experts = match ratio {
            2 => 4,
            4 => 8,
            8 => 16,
            _ => return Err(Error::Config(format!("no sparsity preset 1:{ratio}"))),
        };
        Ok(MoeConfig {
            experts,
            active: 2,
            shared: true,
            alpha: Alpha::Auto,
            init_gain: 1.0,
            pool: ExpertPool::PerToken,
        })
    }

    pub fn routed_experts(&self) -> usize {
        self.experts - usize::from(self.shared)
    }

    pub fn routed_active(&self) -> usize {
        self.active - usize::from(self.shared)
    }

    pub fn alpha_value(&self) -> Result<f64> {
        match self.alpha {
            Alpha::Fixed(a) => Ok(a),
            Alpha::Auto => default_alpha(self.experts, self.active),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("moe: {m}")));
        if self.experts == 0 {
            return bad("at least one expert");
        }
        if self.active == 0 || self.active > self.experts {
            return bad("active must be in 1..=experts");
        }
        if self.routed_active() > self.routed_experts() {
            return bad("more routed activations than routed experts");
        }
        let alpha = self.alpha_value()?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return bad("init_gain must be positive");
        }
        Ok(())
    }
}

/// `experts / active`.
pub fn default_alpha(experts: usize, active: usize) -> Result<f64> {
    if active == 0 || active > experts {
        return Err(Error::Config(format!("default_alpha({experts}, {active})")));
    }
    Ok(experts as f64 / active as f64)
}

/// Top-`k` routing of one score vector: selected indices (descending score,
/// ties to the lowest index) and their softmax gates.
pub fn route(scores: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("route: k = {k} over {} experts", scores.len())));
    }
    let idx = top_k_indices(scores, k);
    let m = scores[idx[0]];
    let e: Vec<f64> = idx.iter().map(|&i| libm::exp(scores[i] - m)).collect();
    let z: f64 = e.iter().sum();
    Ok((idx, e.iter().map(|v| v / z).collect()))
}

/// Routing decisions of one MoE evaluation, row-major `[rows, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub experts: usize,
    pub k: usize,
    pub selected: Arc<[usize]>,
}

impl Routing {
    pub fn rows(&self) -> usize {
        self.selected.len().checked_div(self.k).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeNet {
    pub router: Option<ParamId>,
    pub experts: Vec<SwiGlu>,
    pub shared: Option<SwiGlu>,
    pub k: usize,
    pub alpha: f64,
    pub width: usize,
}

impl MoeNet {
    /// Fresh per-position bank; `hidden` is the total hidden width split
    /// evenly over all experts.
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        prefix: &str,
        width: usize,
        hidden: usize,
        cfg: &MoeConfig,
        scales: InitScales,
    ) -> Result<Self> {
        cfg.validate()?;
        let per = expert_hidden(hidden, cfg.experts)?;
        let routed_scales = InitScales::new(scales.up, scales.gate, scales.down * cfg.init_gain);
        let experts = (0..cfg.routed_experts())
            .map(|e| SwiGlu::init(store, rng, &format!("{prefix}.expert{e}"), width, per, routed_scales))
            .collect();
        let shared = cfg
            .shared
            .then(|| SwiGlu::init(store, rng, &format!("{prefix}.shared"), width, per, scales));
        let router = init_router(store, rng, prefix, width, cfg.routed_experts(), cfg.routed_active());
        Ok(MoeNet {
            router,
            experts,
            shared,
            k: cfg.routed_active(),
            alpha: cfg.alpha_value()?,
            width,
        })
    }

    /// `x: [m, width]`, grouped evaluation: rows are bucketed per expert,
    /// each expert runs once on its bucket, results are scattered back.
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<(Var, Option<Routing>)> {
        let rows = g.tape.shape(x)[0];
        let mut out = match &self.shared {
            Some(s) => Some(s.forward(g, x)?),
            None => None,
        };
        let mut routing = None;
        if let Some(router) = self.router {
            let (gates, selected) = self.gates(g, x, router)?;
            let mut buckets: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); self.experts.len()];
            for (slot, &e) in selected.iter().enumerate() {
                buckets[e].0.push(slot / self.k);
                buckets[e].1.push(slot);
            }
            let mut routed: Option<Var> = None;
            for (expert, (rows_e, slots_e)) in self.experts.iter().zip(buckets) {
                if rows_e.is_empty() {
                    continue;
                }
                let rows_e: Arc<[usize]> = rows_e.into();
                let n = slots_e.len();
                let xe = g.tape.gather_rows(x, rows_e.clone())?;
                let ye = expert.forward(g, xe)?;
                let ge = g.tape.gather(gates, slots_e.into(), &[n])?;
                let ye = g.tape.row_scale(ye, ge)?;
                let ye = g.tape.scatter_rows(ye, rows_e, rows)?;
                routed = Some(match routed {
                    Some(acc) => g.tape.add(acc, ye)?,
                    None => ye,
                });
            }
            let routed = g.tape.scale(routed.expect("every row selects an expert"), self.alpha)?;
            out = Some(match out {
                Some(s) => g.tape.add(routed, s)?,
                None => routed,
            });
            routing = Some(Routing {
                experts: self.experts.len(),
                k: self.k,
                selected,
            });
        }
        let out = out.ok_or_else(|| Error::Config("moe with neither routed nor shared experts".into()))?;
        Ok((out, routing))
    }

    /// Reference dispatch: every row separately, experts in selection order.
    pub fn forward_naive<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let rows = g.tape.shape(x)[0];
        let selection = match self.router {
            Some(router) => Some(self.gates(g, x, router)?),
            None => None,
        };
        let mut outs = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = g.tape.gather_rows(x, Arc::from([r]))?;
            let mut y = match &self.shared {
                Some(s) => Some(s.forward(g, xr)?),
                None => None,
            };
            if let Some((gates, selected)) = &selection {
                let mut acc: Option<Var> = None;
                for slot in r * self.k..(r + 1) * self.k {
                    let ye = self.experts[selected[slot]].forward(g, xr)?;
                    let gv = g.tape.gather(*gates, Arc::from([slot]), &[1])?;
                    let ye = g.tape.row_scale(ye, gv)?;
                    acc = Some(match acc {
                        Some(a) => g.tape.add(a, ye)?,
                        None => ye,
                    });
                }
                let routed = g.tape.scale(acc.expect("k >= 1"), self.alpha)?;
                y = Some(match y {
                    Some(s) => g.tape.add(routed, s)?,
                    None => routed,
                });
            }
            outs.push(y.ok_or_else(|| Error::Config("moe with neither routed nor shared experts".into()))?);
        }
        g.tape.concat(&outs, 0)
    }

    fn gates<R: Real>(&self, g: &mut Graph<'_, R>, x: Var, router: ParamId) -> Result<(Var, Arc<[usize]>)> {
        let w = g.param(router)?;
        let scores = g.tape.matmul(x, w)?;
        let (top, selected) = g.tape.topk(scores, self.k)?;
        let gates = g.tape.softmax(top)?;
        Ok((gates, selected))
    }

    /// Every kernel of this bank, shared pool members included.
    pub fn param_count(&self) -> usize {
        let experts: usize = self.experts.iter().map(SwiGlu::param_count).sum();
        experts + self.shared.as_ref().map_or(0, SwiGlu::param_count) + self.router_params()
    }

    /// Parameters touched by one token.
    pub fn activated_param_count(&self) -> usize {
        let per = self.experts.first().map_or(0, SwiGlu::param_count);
        self.k * per + self.shared.as_ref().map_or(0, SwiGlu::param_count) + self.router_params()
    }

    fn router_params(&self) -> usize {
        if self.router.is_some() {
            self.width * self.experts.len()
        } else {
            0
        }
    }

    /// Forward GEMM multiply-adds per token.
    pub fn macs_per_row(&self) -> usize {
        let per = self.experts.first().map_or(0, SwiGlu::macs_per_row);
        self.k * per + self.shared.as_ref().map_or(0, SwiGlu::macs_per_row) + self.router_params()
    }
}

fn expert_hidden(hidden: usize, experts: usize) -> Result<usize> {
    if !hidden.is_multiple_of(experts) {
        return Err(Error::Divisibility {
            what: "expanded hidden width",
            value: hidden,
            by: experts,
        });
    }
    Ok(hidden / experts)
}

fn init_router<R: Real>(
    store: &mut ParamStore<R>,
    rng: &mut impl Rng,
    prefix: &str,
    width: usize,
    routed: usize,
    k: usize,
) -> Option<ParamId> {
    (k > 0).then(|| {
        let w: Tensor<R> = xavier_normal(rng, width, routed, 1.0);
        let mut cols: Vec<Vec<f64>> = (0..routed)
            .map(|e| (0..width).map(|i| w.data()[i * routed + e].f64()).collect())
            .collect();
        // Orthogonal columns of equal norm (equal norm only when there are
        // more experts than dimensions): no expert is favoured before training.
        if routed <= width {
            for e in 0..routed {
                for prev in 0..e {
                    let dot: f64 = cols[e].iter().zip(&cols[prev]).map(|(a, b)| a * b).sum();
                    let (head, tail) = cols.split_at_mut(e);
                    for (a, b) in tail[0].iter_mut().zip(&head[prev]) {
                        *a -= dot * b;
                    }
                }
                let n = libm::sqrt(cols[e].iter().map(|v| v * v).sum::<f64>());
                cols[e].iter_mut().for_each(|v| *v /= n);
            }
        } else {
            for c in &mut cols {
                let n = libm::sqrt(c.iter().map(|v| v * v).sum::<f64>());
                c.iter_mut().for_each(|v| *v /= n);
            }
        }
        let target = libm::sqrt(2.0 * width as f64 / (width + routed) as f64);
        let w = Tensor::from_fn([width, routed], |j| R::of(cols[j % routed][j / routed] * target));
        store.push(format!("{prefix}.router"), ParamRole::Router, w)
    })
}

/// One pool of `positions * routed` experts and a single router shared by
/// every position of a stage; each position keeps its own shared expert.
#[allow(clippy::too_many_arguments)]
pub fn init_global_pool<R: Real>(
    store: &mut ParamStore<R>,
    rng: &mut impl Rng,
    prefix: &str,
    positions: usize,
    width: usize,
    hidden: usize,
    cfg: &MoeConfig,
    scales: InitScales,
) -> Result<Vec<MoeNet>> {
    cfg.validate()?;
    let per = expert_hidden(hidden, cfg.experts)?;
    let routed_scales = InitScales::new(scales.up, scales.gate, scales.down * cfg.init_gain);
    let pool: Vec<SwiGlu> = (0..positions * cfg.routed_experts())
        .map(|e| SwiGlu::init(store, rng, &format!("{prefix}.pool{e}"), width, per, routed_scales))
        .collect();
    let router = init_router(store, rng, prefix, width, pool.len(), cfg.routed_active());
    let alpha = cfg.alpha_value()?;
    Ok((0..positions)
        .map(|p| MoeNet {
            router,
            experts: pool.clone(),
            shared: cfg
                .shared
                .then(|| SwiGlu::init(store, rng, &format!("{prefix}.pos{p}.shared"), width, per, scales)),
            k: cfg.routed_active(),
            alpha,
            width,
        })
        .collect())
}

/// Kernels of one SwiGLU expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights<R> {
    pub up: Tensor<R>,
    pub gate: Tensor<R>,
    pub down: Tensor<R>,
}

/// Partition the hidden axis of a dense SwiGLU into `experts` contiguous
/// slabs: expert `j` takes up/gate columns and down rows of slab `j`.
pub fn split_dense<R: Real>(dense: &ExpertWeights<R>, experts: usize) -> Result<Vec<ExpertWeights<R>>> {
    let hidden = dense.up.shape()[1];
    if dense.gate.shape() != dense.up.shape() || dense.down.shape() != [hidden, dense.up.shape()[0]] {
        return Err(crate::error::shape_err(
            "split_dense",
            format!(
                "up {:?} gate {:?} down {:?}",
                dense.up.shape(),
                dense.gate.shape(),
                dense.down.shape()
            ),
        ));
    }
    if experts == 0 {
        return Err(Error::Config("split_dense into zero experts".into()));
    }
    let per = expert_hidden(hidden, experts)?;
    (0..experts)
        .map(|j| {
            Ok(ExpertWeights {
                up: dense.up.narrow(1, j * per, per)?,
                gate: dense.gate.narrow(1, j * per, per)?,
                down: dense.down.narrow(0, j * per, per)?,
            })
        })
        .collect()
}

/// Replace a dense SwiGLU in `store` by a bank of experts sliced from it.
/// The last slab becomes the shared expert when `cfg.shared`; the router
/// starts at zero so every token sees uniform gates.
pub fn split_swiglu<R: Real>(
    store: &mut ParamStore<R>,
    dense: &SwiGlu,
    prefix: &str,
    cfg: &MoeConfig,
) -> Result<MoeNet> {
    cfg.validate()?;
    let weights = ExpertWeights {
        up: store.value(dense.up).clone(),
        gate: store.value(dense.gate).clone(),
        down: store.value(dense.down).clone(),
    };
    let mut slabs = split_dense(&weights, cfg.experts)?;
    let per = dense.hidden / cfg.experts;
    let push = |store: &mut ParamStore<R>, name: &str, w: ExpertWeights<R>| SwiGlu {
        up: store.push(format!("{name}.up"), ParamRole::Up, w.up),
        gate: store.push(format!("{name}.gate"), ParamRole::Gate, w.gate),
        down: store.push(format!("{name}.down"), ParamRole::Down, w.down),
        width: dense.width,
        hidden: per,
    };
    let shared_slab = if cfg.shared { slabs.pop() } else { None };
    let experts = slabs
        .into_iter()
        .enumerate()
        .map(|(e, w)| push(store, &format!("{prefix}.expert{e}"), w))
        .collect();
    let shared = shared_slab.map(|w| push(store, &format!("{prefix}.shared"), w));
    let k = cfg.routed_active();
    let router = (k > 0).then(|| {
        store.push(
            format!("{prefix}.router"),
            ParamRole::Router,
            Tensor::zeros([dense.width, cfg.routed_experts()]),
        )
    });
    Ok(MoeNet {
        router,
        experts,
        shared,
        k,
        alpha: cfg.alpha_value()?,
        width: dense.width,
    })
}

/// Per-position routed-expert activation counts over a window of examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub routed: usize,
    pub k: usize,
    pub shared: bool,
    /// `counts[position][expert]`
    pub counts: Vec<Vec<u64>>,
    /// Examples seen per position.
    pub window: Vec<u64>,
}

impl LoadStats {
    pub fn new(positions: usize, routed: usize, k: usize, shared: bool) -> Self {
        LoadStats {
            routed,
            k,
            shared,
            counts: vec![vec![0; routed]; positions],
            window: vec![0; positions],
        }
    }

    pub fn record(&mut self, position: usize, routing: &Routing) -> Result<()> {
        if routing.experts != self.routed || routing.k != self.k || position >= self.counts.len() {
            return Err(Error::Config(format!(
                "routing of {} experts / k {} at position {position} does not fit these stats",
                routing.experts, routing.k
            )));
        }
        for &e in routing.selected.iter() {
            self.counts[position][e] += 1;
        }
        self.window[position] += routing.rows() as u64;
        Ok(())
    }

    /// Fraction of examples activating each routed expert, followed by the
    /// shared expert (always 1) when present.
    pub fn frequencies(&self, position: usize) -> Result<Vec<f64>> {
        let n = self.window[position];
        if n == 0 {
            return Err(Error::UndefinedMetric("load balance over an empty window"));
        }
        let mut f: Vec<f64> = self.counts[position].iter().map(|&c| c as f64 / n as f64).collect();
        if self.shared {
            f.push(1.0);
        }
        Ok(f)
    }

    /// Routed-expert frequency under perfectly uniform routing.
    pub fn uniform(&self) -> f64 {
        self.k as f64 / self.routed as f64
    }

    /// Coefficient of variation of routed-expert frequencies.
    pub fn coefficient_of_variation(&self, position: usize) -> Result<f64> {
        let f = self.frequencies(position)?;
        let f = &f[..self.routed];
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let var = f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f.len() as f64;
        Ok(libm::sqrt(var) / mean)
    }

    /// Largest `|freq - uniform| / uniform` over positions and routed experts.
    pub fn max_relative_deviation(&self) -> Result<f64> {
        let u = self.uniform();
        let mut worst: f64 = 0.0;
        for p in 0..self.counts.len() {
            for f in &self.frequencies(p)?[..self.routed] {
                worst = worst.max((f - u).abs() / u);
            }
        }
        Ok(worst)
    }
}

/// Aggregate recorded `(position, routing)` decisions.
pub fn load_balance(records: &[(usize, Routing)], positions: usize, shared: bool) -> Result<LoadStats> {
    let first = records
        .first()
        .ok_or(Error::UndefinedMetric("load balance over an empty window"))?;
    let mut stats = LoadStats::new(positions, first.1.experts, first.1.k, shared);
    for (p, r) in records {
        stats.record(*p, r)?;
    }
    Ok(stats)
}
