//! Token-parallel execution over `N` logical devices.
//!
//! Per-position weights are partitioned by ownership: device `d` runs the
//! mixing-stage networks of heads `d*H/N..(d+1)*H/N` and the reverting-stage
//! networks of tokens `d*T/N..(d+1)*T/N`. Activations move only through
//! [`all2all`], which re-shards a tensor from one axis to another and logs
//! the bytes that cross devices.
//!
//! The optimized plan keeps activations token-sharded between blocks, so a
//! block needs one exchange into head layout and one back (`2L`), plus a
//! final exchange to batch layout before the heads. The first block carries
//! its mixed input along with the stage output on the return exchange, which
//! gives every token owner its slice of the block input for the residual.
//! The naive plan returns to batch layout around every per-position stage
//! (`4L`).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::block::{Block, BlockKind, Stage};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mixing::MixLayout;
use crate::model::Model;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Named axis a tensor is sharded on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    Batch,
    Head,
    Token,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Batch => "batch",
            Layout::Head => "head",
            Layout::Token => "token",
        })
    }
}

/// A global tensor split into equal slices along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardedTensor<R> {
    shape: Vec<usize>,
    dim: usize,
    layout: Layout,
    slices: Vec<Tensor<R>>,
}

impl<R: Real> ShardedTensor<R> {
    pub fn shard(x: &Tensor<R>, dim: usize, layout: Layout, devices: usize) -> Result<Self> {
        let ext = *x
            .shape()
            .get(dim)
            .ok_or_else(|| Error::Layout(format!("axis {dim} of {:?}", x.shape())))?;
        divisible(ext, devices, "sharded axis")?;
        let part = ext / devices;
        let slices = (0..devices).map(|d| x.narrow(dim, d * part, part)).collect::<Result<_>>()?;
        Ok(ShardedTensor {
            shape: x.shape().to_vec(),
            dim,
            layout,
            slices,
        })
    }

    /// Assemble from per-device slices that agree on every axis but `dim`.
    pub fn from_slices(slices: Vec<Tensor<R>>, dim: usize, layout: Layout) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::Layout("no device slices".into()))?;
        let mut shape = first.shape().to_vec();
        if dim >= shape.len() {
            return Err(Error::Layout(format!("axis {dim} of {shape:?}")));
        }
        for s in &slices {
            if s.shape() != first.shape() {
                return Err(Error::Layout(format!(
                    "device slices {:?} and {:?} differ",
                    first.shape(),
                    s.shape()
                )));
            }
        }
        shape[dim] *= slices.len();
        Ok(ShardedTensor {
            shape,
            dim,
            layout,
            slices,
        })
    }

    pub fn unshard(&self) -> Result<Tensor<R>> {
        let parts: Vec<&Tensor<R>> = self.slices.iter().collect();
        Tensor::concat(&parts, self.dim)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn devices(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, device: usize) -> &Tensor<R> {
        &self.slices[device]
    }

    pub fn slices(&self) -> &[Tensor<R>] {
        &self.slices
    }

    pub fn bytes(&self) -> usize {
        self.shape.iter().product::<usize>() * R::BYTES
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommEvent {
    pub label: String,
    pub bytes: usize,
    pub from: Layout,
    pub to: Layout,
}

/// Ordered record of every all-to-all exchange.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLog {
    pub events: Vec<CommEvent>,
}

impl CommLog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.events.iter().map(|e| e.bytes).sum()
    }
}

impl fmt::Display for CommLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.events.iter().enumerate() {
            writeln!(f, "{:>3}  {:<24} {:>6} -> {:<6} {:>10} bytes", i + 1, e.label, e.from, e.to, e.bytes)?;
        }
        write!(f, "all2all events: {}, bytes: {}", self.len(), self.total_bytes())
    }
}

/// Re-shard `x` onto axis `to`: device `d` ends with the full extent of the
/// old shard axis and slice `d` of the new one. Pieces that stay on their
/// device are not counted, so `(N - 1) / N` of the tensor bytes are logged.
pub fn all2all<R: Real>(
    x: &ShardedTensor<R>,
    to: usize,
    layout: Layout,
    label: &str,
    log: &mut CommLog,
) -> Result<ShardedTensor<R>> {
    let n = x.devices();
    if to == x.dim || to >= x.shape.len() {
        return Err(Error::Layout(format!(
            "all2all from axis {} to axis {to} of {:?}",
            x.dim, x.shape
        )));
    }
    divisible(x.shape[to], n, "all2all target axis")?;
    let part = x.shape[to] / n;
    let mut bytes = 0;
    let mut slices = Vec::with_capacity(n);
    for d in 0..n {
        let mut pieces = Vec::with_capacity(n);
        for s in 0..n {
            let piece = x.slices[s].narrow(to, d * part, part)?;
            if s != d {
                bytes += piece.len() * R::BYTES;
            }
            pieces.push(piece);
        }
        let refs: Vec<&Tensor<R>> = pieces.iter().collect();
        slices.push(Tensor::concat(&refs, x.dim)?);
    }
    log.events.push(CommEvent {
        label: label.to_string(),
        bytes,
        from: x.layout,
        to: layout,
    });
    Ok(ShardedTensor {
        shape: x.shape.clone(),
        dim: to,
        layout,
        slices,
    })
}

fn divisible(value: usize, by: usize, what: &'static str) -> Result<()> {
    if by == 0 || !value.is_multiple_of(by) {
        return Err(Error::Divisibility { what, value, by });
    }
    Ok(())
}

/// Runs one step on every device and returns results in device order.
pub trait DeviceExecutor {
    fn run<T, F>(&self, devices: usize, step: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync;
}

/// Devices run one after another in index order on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl DeviceExecutor for Sequential {
    fn run<T, F>(&self, devices: usize, step: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        (0..devices).map(step).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Plan {
    /// `2L + 1` exchanges.
    Optimized,
    /// `4L` exchanges.
    Naive,
}

impl Plan {
    /// Exchanges for `layers` blocks.
    pub fn expected_exchanges(self, layers: usize) -> usize {
        match self {
            Plan::Optimized => 2 * layers + 1,
            Plan::Naive => 4 * layers,
        }
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plan::Optimized => "optimized",
            Plan::Naive => "naive",
        })
    }
}

pub struct ParallelOutput<R> {
    /// Final token matrix `[B, T, D]`.
    pub tokens: Tensor<R>,
    /// Task logits in batch order.
    pub logits: Vec<f64>,
    pub log: CommLog,
}

/// `[b, H, t, chunk]` head-layout pieces of a `[b, t, D]` token slice whose
/// first token is `t0`: entry `[.., h, i, ..]` is the chunk of token `t0 + i`
/// that mixed position `h` reads.
fn to_head_pieces<R: Real>(x: &Tensor<R>, layout: &MixLayout, t0: usize) -> Result<Tensor<R>> {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (heads, c) = (layout.heads(), layout.chunk());
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..t {
                let (_, chunk) = layout.source(h, t0 + i);
                let at = (bi * t + i) * d + chunk * c;
                out.extend_from_slice(&x.data()[at..at + c]);
            }
        }
    }
    Tensor::new([b, heads, t, c], out)
}

/// Inverse of [`to_head_pieces`] for `[b, H, t, chunk]` pieces of tokens
/// starting at `t0`.
fn from_head_pieces<R: Real>(q: &Tensor<R>, layout: &MixLayout, t0: usize) -> Result<Tensor<R>> {
    let (b, heads, t, c) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let d = layout.dim();
    let mut out = alloc::vec![R::zero(); b * t * d];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..t {
                let (_, chunk) = layout.source(h, t0 + i);
                let src = ((bi * heads + h) * t + i) * c;
                let dst = (bi * t + i) * d + chunk * c;
                out[dst..dst + c].copy_from_slice(&q.data()[src..src + c]);
            }
        }
    }
    Tensor::new([b, t, d], out)
}

/// Stage networks on one device's slab of positions, then the residual
/// combination.
fn run_stage<R: Real>(
    params: &ParamStore<R>,
    stage: &Stage,
    x: &Tensor<R>,
    residual: &Tensor<R>,
    first: usize,
) -> Result<Tensor<R>> {
    let mut g = Graph::new(params, false);
    let xv = g.tape.constant(x.clone());
    let rv = g.tape.constant(residual.clone());
    let mut routes = Vec::new();
    let f = stage.inner(&mut g, xv, first, &mut routes)?;
    let y = stage.combine(&mut g, rv, f)?;
    Ok(g.tape.value(y).clone())
}

fn stage_inner<R: Real>(params: &ParamStore<R>, stage: &Stage, x: &Tensor<R>, first: usize) -> Result<Tensor<R>> {
    let mut g = Graph::new(params, false);
    let xv = g.tape.constant(x.clone());
    let mut routes = Vec::new();
    let f = stage.inner(&mut g, xv, first, &mut routes)?;
    Ok(g.tape.value(f).clone())
}

fn stage_combine<R: Real>(params: &ParamStore<R>, stage: &Stage, residual: &Tensor<R>, f: &Tensor<R>) -> Result<Tensor<R>> {
    let mut g = Graph::new(params, false);
    let rv = g.tape.constant(residual.clone());
    let fv = g.tape.constant(f.clone());
    let y = stage.combine(&mut g, rv, fv)?;
    Ok(g.tape.value(y).clone())
}

/// Check that a block can be token-parallelized on `devices` devices and
/// return its layout and reverting stage.
fn parallel_parts(block: &Block, devices: usize) -> Result<(&MixLayout, &Stage)> {
    let (Some(layout), Some(stage2)) = (&block.layout, &block.stage2) else {
        return Err(Error::Layout(
            "token parallelism needs mixing and reverting blocks".into(),
        ));
    };
    if block.kind != BlockKind::TokenMixerLarge {
        return Err(Error::Layout("token parallelism needs mixing and reverting blocks".into()));
    }
    if !layout.strategy().covers_all_tokens() {
        return Err(Error::Layout(format!(
            "{:?} mixing does not give every position one chunk of every token",
            layout.strategy()
        )));
    }
    divisible(layout.heads(), devices, "heads")?;
    divisible(layout.tokens(), devices, "tokens")?;
    Ok((layout, stage2))
}

/// Input of one block in the optimized plan.
pub enum BlockInput<'a, R> {
    /// `[B/N, T, D]` slices (the first block).
    Batch(&'a ShardedTensor<R>),
    /// `[B, T/N, D]` slices.
    Token(&'a ShardedTensor<R>),
}

/// One block of the optimized plan: exchange into head layout, mixing stage
/// on owned heads, exchange back to token layout, reverting stage on owned
/// tokens. Returns the token-sharded output and, for batch-sharded input,
/// the token-sharded block input recovered from the return exchange.
pub fn parallel_block_forward<R: Real, E: DeviceExecutor>(
    block: &Block,
    params: &ParamStore<R>,
    input: BlockInput<'_, R>,
    label: &str,
    exec: &E,
    log: &mut CommLog,
) -> Result<(ShardedTensor<R>, Option<ShardedTensor<R>>)> {
    let (x, batch_input) = match input {
        BlockInput::Batch(x) => (x, true),
        BlockInput::Token(x) => (x, false),
    };
    let n = x.devices();
    let (layout, stage2) = parallel_parts(block, n)?;
    let expected = if batch_input { (0, Layout::Batch) } else { (1, Layout::Token) };
    if (x.dim(), x.layout()) != expected || x.shape()[1..] != [layout.tokens(), layout.dim()] {
        return Err(Error::Layout(format!(
            "{label}: input {:?} sharded on {} (axis {})",
            x.shape(),
            x.layout(),
            x.dim()
        )));
    }
    let (tokens, heads, chunk) = (layout.tokens(), layout.heads(), layout.chunk());
    let (tn, hn) = (tokens / n, heads / n);
    let t0 = |d: usize| if batch_input { 0 } else { d * tn };

    // local repack into [b, H, t, chunk], sharded on batch (axis 0) or token (axis 2)
    let pieces = exec.run(n, |d| to_head_pieces(x.slice(d), layout, t0(d)))?;
    let from = if batch_input { (0, Layout::Batch) } else { (2, Layout::Token) };
    let pieces = ShardedTensor::from_slices(pieces, from.0, from.1)?;
    let mixed = all2all(&pieces, 1, Layout::Head, &format!("{label}.to-head"), log)?;
    let batch = mixed.shape()[0];

    // mixing stage on owned heads: [B, H/N, T, chunk] == [B, H/N, W]
    let payload = exec.run(n, |d| {
        let m = mixed.slice(d).clone().reshape([batch, hn, layout.width()])?;
        let h = run_stage(params, &block.stage1, &m, &m, d * hn)?;
        let h = h.reshape([batch, hn, tokens, chunk])?;
        if batch_input {
            let m = m.reshape([batch, hn, tokens, chunk])?;
            Tensor::concat(&[&h, &m], 3)
        } else {
            Ok(h)
        }
    })?;
    let payload = ShardedTensor::from_slices(payload, 1, Layout::Head)?;
    let back = all2all(&payload, 2, Layout::Token, &format!("{label}.to-token"), log)?;

    // revert locally and run the reverting stage on owned tokens
    let outs = exec.run(n, |d| {
        let q = back.slice(d);
        let (h_part, residual) = if batch_input {
            let h = from_head_pieces(&q.narrow(3, 0, chunk)?, layout, d * tn)?;
            let m = from_head_pieces(&q.narrow(3, chunk, chunk)?, layout, d * tn)?;
            (h, m)
        } else {
            (from_head_pieces(q, layout, d * tn)?, x.slice(d).clone())
        };
        let out = run_stage(params, stage2, &h_part, &residual, d * tn)?;
        Ok((out, residual))
    })?;
    let (outs, residuals): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
    let out = ShardedTensor::from_slices(outs, 1, Layout::Token)?;
    let recovered = if batch_input {
        Some(ShardedTensor::from_slices(residuals, 1, Layout::Token)?)
    } else {
        None
    };
    Ok((out, recovered))
}

/// Naive plan for one block on batch-sharded input: every per-position stage
/// is bracketed by an exchange out of and back into batch layout.
pub fn naive_block_forward<R: Real, E: DeviceExecutor>(
    block: &Block,
    params: &ParamStore<R>,
    x: &ShardedTensor<R>,
    label: &str,
    exec: &E,
    log: &mut CommLog,
) -> Result<ShardedTensor<R>> {
    let n = x.devices();
    let (layout, stage2) = parallel_parts(block, n)?;
    let (hn, tn) = (layout.heads() / n, layout.tokens() / n);
    let mixed = exec.run(n, |d| layout.mix_tensor(x.slice(d)))?;
    let mixed = ShardedTensor::from_slices(mixed, 0, Layout::Batch)?;
    let mixed = all2all(&mixed, 1, Layout::Head, &format!("{label}.mixing-in"), log)?;
    let h = exec.run(n, |d| run_stage(params, &block.stage1, mixed.slice(d), mixed.slice(d), d * hn))?;
    let h = ShardedTensor::from_slices(h, 1, Layout::Head)?;
    let h = all2all(&h, 0, Layout::Batch, &format!("{label}.mixing-out"), log)?;
    let r = exec.run(n, |d| layout.revert_tensor(h.slice(d)))?;
    let r = ShardedTensor::from_slices(r, 0, Layout::Batch)?;
    let r = all2all(&r, 1, Layout::Token, &format!("{label}.reverting-in"), log)?;
    let f = exec.run(n, |d| stage_inner(params, stage2, r.slice(d), d * tn))?;
    let f = ShardedTensor::from_slices(f, 1, Layout::Token)?;
    let f = all2all(&f, 0, Layout::Batch, &format!("{label}.reverting-out"), log)?;
    let out = exec.run(n, |d| stage_combine(params, stage2, x.slice(d), f.slice(d)))?;
    ShardedTensor::from_slices(out, 0, Layout::Batch)
}

/// Full model forward on `devices` logical devices. The tokenizer runs data
/// parallel on batch slices; the task head runs on batch slices after the
/// final exchange.
pub fn run_parallel<R: Real, E: DeviceExecutor>(
    model: &Model,
    params: &ParamStore<R>,
    ids: &[u32],
    rows: usize,
    devices: usize,
    plan: Plan,
    exec: &E,
) -> Result<ParallelOutput<R>> {
    divisible(rows, devices, "batch")?;
    let nf = model.tokenizer.features.len();
    let bn = rows / devices;
    let x = exec.run(devices, |d| {
        let mut g = Graph::new(params, false);
        let v = model.tokenizer.forward(&mut g, &ids[d * bn * nf..(d + 1) * bn * nf], bn)?;
        Ok(g.tape.value(v).clone())
    })?;
    let x = ShardedTensor::from_slices(x, 0, Layout::Batch)?;
    let mut log = CommLog::default();
    let out = match plan {
        Plan::Optimized => {
            let mut layers: Vec<ShardedTensor<R>> = Vec::with_capacity(model.blocks.len() + 1);
            let mut h: Option<ShardedTensor<R>> = None;
            for (l, block) in model.blocks.iter().enumerate() {
                let label = format!("layer{}", l + 1);
                let input = match &h {
                    None => BlockInput::Batch(&x),
                    Some(t) => BlockInput::Token(t),
                };
                let (mut out, recovered) = parallel_block_forward(block, params, input, &label, exec, &mut log)?;
                if let Some(x0) = recovered {
                    layers.push(x0);
                }
                out = add_junctions(model, l + 1, out, &layers, exec)?;
                layers.push(out.clone());
                h = Some(out);
            }
            match h {
                Some(t) => all2all(&t, 0, Layout::Batch, "output.to-batch", &mut log)?,
                None => x,
            }
        }
        Plan::Naive => {
            let mut layers = alloc::vec![x.clone()];
            let mut h = x;
            for (l, block) in model.blocks.iter().enumerate() {
                let out = naive_block_forward(block, params, &h, &format!("layer{}", l + 1), exec, &mut log)?;
                h = add_junctions(model, l + 1, out, &layers, exec)?;
                layers.push(h.clone());
            }
            h
        }
    };
    let logits = exec.run(devices, |d| {
        let mut g = Graph::new(params, false);
        let v = g.tape.constant(out.slice(d).clone());
        let z = model.head.forward(&mut g, v, model.config.eps)?;
        Ok(g.tape.value(z).to_f64_vec())
    })?;
    Ok(ParallelOutput {
        tokens: out.unshard()?,
        logits: logits.into_iter().flatten().collect(),
        log,
    })
}

/// Interval residuals landing at `layer`, added slice by slice.
fn add_junctions<R: Real, E: DeviceExecutor>(
    model: &Model,
    layer: usize,
    mut out: ShardedTensor<R>,
    layers: &[ShardedTensor<R>],
    exec: &E,
) -> Result<ShardedTensor<R>> {
    for &(from, to) in &model.junctions {
        if to != layer {
            continue;
        }
        let src = &layers[from];
        if (src.dim(), src.shape()) != (out.dim(), out.shape()) {
            return Err(Error::Layout(format!("interval residual {from} -> {to} layouts differ")));
        }
        let sums = exec.run(out.devices(), |d| {
            let mut tape = Tape::new();
            let a = tape.constant(out.slice(d).clone());
            let b = tape.constant(src.slice(d).clone());
            let s = tape.add(a, b)?;
            Ok(tape.value(s).clone())
        })?;
        out = ShardedTensor::from_slices(sums, out.dim(), out.layout())?;
    }
    Ok(out)
}

/// Serial reference: final tokens and task logits of [`Model::forward`].
pub fn run_serial<R: Real>(model: &Model, params: &ParamStore<R>, ids: &[u32], rows: usize) -> Result<(Tensor<R>, Vec<f64>)> {
    let mut g = Graph::new(params, false);
    let out = model.forward(&mut g, ids, rows)?;
    Ok((g.tape.value(out.tokens()).clone(), g.tape.value(out.logits).to_f64_vec()))
}

/// Maximum absolute difference between the parallel and serial outputs,
/// over tokens and logits.
pub fn max_deviation<R: Real>(parallel: &ParallelOutput<R>, serial: &(Tensor<R>, Vec<f64>)) -> Result<f64> {
    if parallel.tokens.shape() != serial.0.shape() {
        return Err(Error::Layout(format!(
            "parallel output {:?} vs serial {:?}",
            parallel.tokens.shape(),
            serial.0.shape()
        )));
    }
    let tokens = parallel.tokens.max_abs_diff(&serial.0).f64();
    let logits = parallel
        .logits
        .iter()
        .zip(&serial.1)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(tokens.max(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn single_device_exchange_is_free() {
        let x = Tensor::<f64>::from_fn([4, 4], |i| i as f64);
        let s = ShardedTensor::shard(&x, 0, Layout::Batch, 1).unwrap();
        let mut log = CommLog::default();
        let y = all2all(&s, 1, Layout::Token, "t", &mut log).unwrap();
        assert_eq!(y.unshard().unwrap(), x);
        assert_eq!(log.events[0].bytes, 0);
    }

    #[test]
    fn two_devices_exchange_half() {
        let x = Tensor::<f64>::from_fn([4, 4], |i| i as f64);
        let s = ShardedTensor::shard(&x, 0, Layout::Batch, 2).unwrap();
        let mut log = CommLog::default();
        let y = all2all(&s, 1, Layout::Token, "t", &mut log).unwrap();
        assert_eq!(y.slice(0).shape(), &[4, 2]);
        assert_eq!(log.events[0].bytes, 8 * 8);
        let back = all2all(&y, 0, Layout::Batch, "b", &mut log).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.unshard().unwrap(), x);
    }

    #[test]
    fn head_pieces_round_trip() {
        use crate::mixing::{MixConfig, MixStrategy};
        let layout = MixLayout::new(4, 8, &MixConfig::new(4, MixStrategy::Diagonal)).unwrap();
        let x = Tensor::<f64>::from_fn([2, 2, 8], |i| i as f64);
        let q = to_head_pieces(&x, &layout, 2).unwrap();
        assert_eq!(q.shape(), &[2, 4, 2, 2]);
        assert_eq!(from_head_pieces(&q, &layout, 2).unwrap(), x);
        let full = Tensor::<f64>::from_fn([2, 4, 8], |i| i as f64);
        let mixed = layout.mix_tensor(&full).unwrap();
        assert_eq!(to_head_pieces(&full, &layout, 0).unwrap().reshape(vec![2, 4, 8]).unwrap(), mixed);
    }
}
