//! Reverse-mode differentiation over a fixed primitive set.
//!
//! Every primitive application appends a node holding its output value, so a
//! tape is also the eager evaluator used for inference. Nodes are appended in
//! evaluation order, which makes the node list topologically sorted by
//! construction; [`Tape::backward`] walks it once in reverse.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::fp8;
use crate::real::{sigmoid, Real};
use crate::tensor::{permute_index, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Leaf,
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    Add,
    Mul,
    Scale(f64),
    /// `[.., n] + [n]`
    AddBias,
    /// `[m, n] * [m]`, row `i` scaled by `s[i]`
    RowScale,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    Permute { axes: Vec<usize> },
    Sigmoid,
    Swish,
    Relu,
    /// Along the last axis.
    Softmax,
    /// Largest `k` entries along the last axis, ties to the lowest index.
    TopK { k: usize },
    /// `out[i] = x[index[i]]` over flat buffers.
    Gather { index: Arc<[usize]>, shape: Vec<usize> },
    /// Rows of a `[m, n]` matrix.
    GatherRows { index: Arc<[usize]> },
    /// `out[index[i], :] += x[i, :]` into a `[rows, n]` zero matrix.
    ScatterRows { index: Arc<[usize]>, rows: usize },
    MeanAxis { axis: usize },
    Sum,
    /// Over the last axis with gain `[n]`.
    RmsNorm { eps: f64 },
    /// Mean binary cross-entropy on logits.
    Bce { labels: Arc<[f64]> },
    /// Per-tensor E4M3 quantize/dequantize, straight-through gradient.
    Fp8RoundTrip,
    Detach,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddBias => "add_bias",
            Primitive::RowScale => "row_scale",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Permute { .. } => "permute",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Swish => "swish",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::TopK { .. } => "topk",
            Primitive::Gather { .. } => "gather",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::ScatterRows { .. } => "scatter_rows",
            Primitive::MeanAxis { .. } => "mean_axis",
            Primitive::Sum => "sum",
            Primitive::RmsNorm { .. } => "rmsnorm",
            Primitive::Bce { .. } => "bce",
            Primitive::Fp8RoundTrip => "fp8_round_trip",
            Primitive::Detach => "detach",
        }
    }
}

struct Node<R> {
    value: Tensor<R>,
    prim: Primitive,
    inputs: Vec<Var>,
    needs_grad: bool,
    /// Selected indices for `TopK`.
    saved: Option<Arc<[usize]>>,
}

pub struct Tape<R> {
    id: u32,
    nodes: Vec<Node<R>>,
    macs: u64,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds performed by `MatMul` nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, Primitive::Leaf, Vec::new(), requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    fn push(
        &mut self,
        value: Tensor<R>,
        prim: Primitive,
        inputs: Vec<Var>,
        needs_grad: bool,
        saved: Option<Arc<[usize]>>,
    ) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            prim,
            inputs,
            needs_grad,
            saved,
        });
        Var { tape: self.id, idx }
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Backward("variable is not on this tape"));
        }
        Ok(())
    }

    /// Apply one primitive. The output is recorded for differentiation when
    /// any input participates in the gradient.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check_var(v)?;
        }
        let (value, saved) = {
            let xs: Vec<&Tensor<R>> = inputs.iter().map(|v| &self.nodes[v.index()].value).collect();
            forward(&prim, &xs, &mut self.macs)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: prim.name() });
        }
        let needs_grad = !matches!(prim, Primitive::Detach)
            && inputs.iter().any(|v| self.nodes[v.index()].needs_grad);
        Ok(self.push(value, prim, inputs.to_vec(), needs_grad, saved))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddBias, &[x, b])
    }

    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(Primitive::RowScale, &[x, s])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[x])
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let ext = self.shape(x).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != ext {
            return Err(shape_err(
                "split",
                format!("sizes {sizes:?} do not cover extent {ext} on axis {axis}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Permute { axes: axes.to_vec() }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Swish, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    /// Returns the selected values (`[.., k]`) and their flat column indices,
    /// row-major.
    pub fn topk(&mut self, x: Var, k: usize) -> Result<(Var, Arc<[usize]>)> {
        let v = self.apply(Primitive::TopK { k }, &[x])?;
        let idx = self.nodes[v.index()]
            .saved
            .clone()
            .expect("topk saves its selection");
        Ok((v, idx))
    }

    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Gather {
                index,
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        self.apply(Primitive::GatherRows { index }, &[x])
    }

    pub fn scatter_rows(&mut self, x: Var, index: Arc<[usize]>, rows: usize) -> Result<Var> {
        self.apply(Primitive::ScatterRows { index, rows }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MeanAxis { axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::RmsNorm { eps }, &[x, gain])
    }

    pub fn bce(&mut self, logits: Var, labels: Arc<[f64]>) -> Result<Var> {
        self.apply(Primitive::Bce { labels }, &[logits])
    }

    pub fn fp8_round_trip(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Fp8RoundTrip, &[x])
    }

    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Detach, &[x])
    }

    /// Gradient of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        self.check_var(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<R>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.index()].needs_grad {
            grads[loss.index()] = Some(vec![R::one()]);
        }
        for i in (0..=loss.index()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.prim, Primitive::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(n);
        for (node, g) in self.nodes.iter().zip(grads) {
            let leaf = matches!(node.prim, Primitive::Leaf) && node.needs_grad;
            out.push(if leaf {
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::from_parts(shape, data),
                    None => Tensor::zeros(shape),
                })
            } else {
                None
            });
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn backprop(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let val = |v: Var| &self.nodes[v.index()].value;
        let wants = |v: Var| self.nodes[v.index()].needs_grad;
        let y = node.value.data();

        match &node.prim {
            Primitive::Leaf | Primitive::Detach => {}
            Primitive::MatMul => {
                let (a, b) = (val(ins[0]), val(ins[1]));
                let (m, k, nn) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if wants(ins[0]) {
                    let bt = transpose(b.data(), k, nn);
                    let mut da = vec![R::zero(); m * k];
                    matmul_into(g, &bt, &mut da, m, nn, k);
                    accumulate(grads, ins[0], da);
                }
                if wants(ins[1]) {
                    let at = transpose(a.data(), m, k);
                    let mut db = vec![R::zero(); k * nn];
                    matmul_into(&at, g, &mut db, k, m, nn);
                    accumulate(grads, ins[1], db);
                }
            }
            Primitive::Add => {
                for &v in ins {
                    if wants(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Primitive::Mul => {
                let (a, b) = (val(ins[0]).data(), val(ins[1]).data());
                if wants(ins[0]) {
                    accumulate(grads, ins[0], g.iter().zip(b).map(|(g, b)| *g * *b).collect());
                }
                if wants(ins[1]) {
                    accumulate(grads, ins[1], g.iter().zip(a).map(|(g, a)| *g * *a).collect());
                }
            }
            Primitive::Scale(c) => {
                let c = R::of(*c);
                accumulate(grads, ins[0], g.iter().map(|g| *g * c).collect());
            }
            Primitive::AddBias => {
                if wants(ins[0]) {
                    accumulate(grads, ins[0], g.to_vec());
                }
                if wants(ins[1]) {
                    let n = val(ins[1]).len();
                    let mut db = vec![R::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d = *d + *r;
                        }
                    }
                    accumulate(grads, ins[1], db);
                }
            }
            Primitive::RowScale => {
                let (x, s) = (val(ins[0]), val(ins[1]).data());
                let n = x.shape()[1];
                if wants(ins[0]) {
                    let dx = g
                        .chunks_exact(n)
                        .zip(s)
                        .flat_map(|(row, &sv)| row.iter().map(move |gv| *gv * sv))
                        .collect();
                    accumulate(grads, ins[0], dx);
                }
                if wants(ins[1]) {
                    let ds = g
                        .chunks_exact(n)
                        .zip(x.data().chunks_exact(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).fold(R::zero(), |acc, (a, b)| acc + *a * *b))
                        .collect();
                    accumulate(grads, ins[1], ds);
                }
            }
            Primitive::Concat { axis } => {
                let (outer, total, inner) = Tensor::<R>::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in ins {
                    let ext = val(v).shape()[*axis];
                    if wants(v) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        accumulate(grads, v, d);
                    }
                    offset += ext;
                }
            }
            Primitive::Slice { axis, start, len } => {
                let x = val(ins[0]);
                let (outer, ext, inner) = Tensor::<R>::axis_split(x.shape(), *axis);
                let mut d = vec![R::zero(); x.len()];
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, ins[0], d);
            }
            Primitive::Reshape { .. } => accumulate(grads, ins[0], g.to_vec()),
            Primitive::Permute { axes } => {
                let index = permute_index(val(ins[0]).shape(), axes);
                let mut d = vec![R::zero(); g.len()];
                for (gv, &src) in g.iter().zip(&index) {
                    d[src] = *gv;
                }
                accumulate(grads, ins[0], d);
            }
            Primitive::Sigmoid => {
                let d = g.iter().zip(y).map(|(g, y)| *g * *y * (R::one() - *y)).collect();
                accumulate(grads, ins[0], d);
            }
            Primitive::Swish => {
                let x = val(ins[0]).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        *g * (s + x * s * (R::one() - s))
                    })
                    .collect();
                accumulate(grads, ins[0], d);
            }
            Primitive::Relu => {
                let x = val(ins[0]).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > R::zero() { *g } else { R::zero() })
                    .collect();
                accumulate(grads, ins[0], d);
            }
            Primitive::Softmax => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(n).zip(y.chunks_exact(n)) {
                    let dot = gr.iter().zip(yr).fold(R::zero(), |s, (a, b)| s + *a * *b);
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| *yv * (*gv - dot)));
                }
                accumulate(grads, ins[0], d);
            }
            Primitive::TopK { k } => {
                let x = val(ins[0]);
                let n = *x.shape().last().unwrap_or(&1);
                let sel = node.saved.as_ref().expect("topk selection");
                let mut d = vec![R::zero(); x.len()];
                for (r, (gr, sr)) in g.chunks_exact(*k).zip(sel.chunks_exact(*k)).enumerate() {
                    for (gv, &c) in gr.iter().zip(sr) {
                        d[r * n + c] = d[r * n + c] + *gv;
                    }
                }
                accumulate(grads, ins[0], d);
            }
            Primitive::Gather { index, .. } => {
                let mut d = vec![R::zero(); val(ins[0]).len()];
                for (gv, &src) in g.iter().zip(index.iter()) {
                    d[src] = d[src] + *gv;
                }
                accumulate(grads, ins[0], d);
            }
            Primitive::GatherRows { index } => {
                let x = val(ins[0]);
                let n = x.shape()[1];
                let mut d = vec![R::zero(); x.len()];
                for (gr, &r) in g.chunks_exact(n).zip(index.iter()) {
                    for (dv, gv) in d[r * n..(r + 1) * n].iter_mut().zip(gr) {
                        *dv = *dv + *gv;
                    }
                }
                accumulate(grads, ins[0], d);
            }
            Primitive::ScatterRows { index, .. } => {
                let n = val(ins[0]).shape()[1];
                let mut d = Vec::with_capacity(index.len() * n);
                for &r in index.iter() {
                    d.extend_from_slice(&g[r * n..(r + 1) * n]);
                }
                accumulate(grads, ins[0], d);
            }
            Primitive::MeanAxis { axis } => {
                let x = val(ins[0]);
                let (outer, ext, inner) = Tensor::<R>::axis_split(x.shape(), *axis);
                let inv = R::one() / R::of(ext as f64);
                let mut d = vec![R::zero(); x.len()];
                for o in 0..outer {
                    for a in 0..ext {
                        let dst = (o * ext + a) * inner;
                        for j in 0..inner {
                            d[dst + j] = g[o * inner + j] * inv;
                        }
                    }
                }
                accumulate(grads, ins[0], d);
            }
            Primitive::Sum => {
                let n = val(ins[0]).len();
                accumulate(grads, ins[0], vec![g[0]; n]);
            }
            Primitive::RmsNorm { eps } => {
                let (x, gain) = (val(ins[0]), val(ins[1]).data());
                let n = gain.len();
                let eps = R::of(*eps);
                let nr = R::of(n as f64);
                let mut dx = vec![R::zero(); x.len()];
                let mut dg = vec![R::zero(); n];
                for ((xr, gr), dxr) in x.data().chunks_exact(n).zip(g.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                    let ms = xr.iter().fold(R::zero(), |s, v| s + *v * *v) / nr;
                    let inv = R::one() / (ms + eps).sqrt();
                    let mut dot = R::zero();
                    for j in 0..n {
                        dot = dot + gr[j] * gain[j] * xr[j];
                        dg[j] = dg[j] + gr[j] * xr[j] * inv;
                    }
                    let c = dot * inv * inv * inv / nr;
                    for j in 0..n {
                        dxr[j] = gr[j] * gain[j] * inv - xr[j] * c;
                    }
                }
                if wants(ins[0]) {
                    accumulate(grads, ins[0], dx);
                }
                if wants(ins[1]) {
                    accumulate(grads, ins[1], dg);
                }
            }
            Primitive::Bce { labels } => {
                let z = val(ins[0]).data();
                let inv = R::one() / R::of(z.len() as f64);
                let d = z
                    .iter()
                    .zip(labels.iter())
                    .map(|(&z, &t)| g[0] * (sigmoid(z) - R::of(t)) * inv)
                    .collect();
                accumulate(grads, ins[0], d);
            }
            Primitive::Fp8RoundTrip => accumulate(grads, ins[0], g.to_vec()),
        }
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Vec<R>>], v: Var, d: Vec<R>) {
    match &mut grads[v.index()] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Gradients of one backward pass, addressable by leaf [`Var`].
pub struct Gradients<R> {
    tape: u32,
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient for a leaf created with `requires_grad`; zero when the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<R>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(|g| g.take())
    }
}

/// `c += a * b` for row-major `[m, k] x [k, n]`. Every output element is
/// summed over `k` in ascending order regardless of tiling.
pub(crate) fn matmul_into<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 16;
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i in (0..full_rows).step_by(MR) {
        for j in (0..full_cols).step_by(NR) {
            let mut acc = [[R::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for kk in 0..k {
                let brow: &[R; NR] = b[kk * n + j..kk * n + j + NR].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + kk];
                    for (cv, &bv) in row.iter_mut().zip(brow) {
                        *cv = *cv + av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
        }
        if full_cols < n {
            naive(a, b, c, i..i + MR, k, n, full_cols);
        }
    }
    naive(a, b, c, full_rows..m, k, n, 0);
}

fn naive<R: Real>(a: &[R], b: &[R], c: &mut [R], rows: core::ops::Range<usize>, k: usize, n: usize, from: usize) {
    for i in rows {
        let crow = &mut c[i * n + from..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n + from..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

pub(crate) fn transpose<R: Real>(a: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut t = vec![R::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Indices of the `k` largest entries, ties broken by lowest index.
pub fn top_k_indices<R: Real>(row: &[R], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower indices first among equal scores
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(core::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

/// A primitive's output and, for `TopK`, the selected indices.
type Evaluated<R> = (Tensor<R>, Option<Arc<[usize]>>);

fn forward<R: Real>(prim: &Primitive, xs: &[&Tensor<R>], macs: &mut u64) -> Result<Evaluated<R>> {
    let op = prim.name();
    let arity = |n: usize| -> Result<()> {
        if xs.len() != n {
            return Err(shape_err(op, format!("expects {n} inputs, got {}", xs.len())));
        }
        Ok(())
    };
    let same_shape = |a: &Tensor<R>, b: &Tensor<R>| -> Result<()> {
        if a.shape() != b.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    };

    let out = match prim {
        Primitive::Leaf => return Err(shape_err(op, "leaves are created with Tape::leaf".into())),
        Primitive::MatMul => {
            arity(2)?;
            let (a, b) = (xs[0], xs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(op, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![R::zero(); m * n];
            matmul_into(a.data(), b.data(), &mut c, m, k, n);
            *macs += (m * k * n) as u64;
            Tensor::from_parts(vec![m, n], c)
        }
        Primitive::Add | Primitive::Mul => {
            arity(2)?;
            same_shape(xs[0], xs[1])?;
            let f = if matches!(prim, Primitive::Add) {
                |a: R, b: R| a + b
            } else {
                |a: R, b: R| a * b
            };
            let data = xs[0].data().iter().zip(xs[1].data()).map(|(a, b)| f(*a, *b)).collect();
            Tensor::from_parts(xs[0].shape().to_vec(), data)
        }
        Primitive::Scale(c) => {
            arity(1)?;
            let c = R::of(*c);
            map(xs[0], |v| v * c)
        }
        Primitive::AddBias => {
            arity(2)?;
            let (x, b) = (xs[0], xs[1]);
            if b.rank() != 1 || x.shape().last() != Some(&b.len()) {
                return Err(shape_err(op, format!("{:?} + bias {:?}", x.shape(), b.shape())));
            }
            let n = b.len();
            let mut data = x.data().to_vec();
            for row in data.chunks_exact_mut(n) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v = *v + *bv;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Primitive::RowScale => {
            arity(2)?;
            let (x, s) = (xs[0], xs[1]);
            if x.rank() != 2 || s.len() != x.shape()[0] {
                return Err(shape_err(op, format!("{:?} rows scaled by {:?}", x.shape(), s.shape())));
            }
            let n = x.shape()[1];
            let data = x
                .data()
                .chunks_exact(n)
                .zip(s.data())
                .flat_map(|(row, &sv)| row.iter().map(move |v| *v * sv))
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Primitive::Concat { axis } => Tensor::concat(xs, *axis)?,
        Primitive::Slice { axis, start, len } => {
            arity(1)?;
            xs[0].narrow(*axis, *start, *len)?
        }
        Primitive::Reshape { shape } => {
            arity(1)?;
            xs[0].clone().reshape(shape.clone())?
        }
        Primitive::Permute { axes } => {
            arity(1)?;
            xs[0].permute(axes)?
        }
        Primitive::Sigmoid => {
            arity(1)?;
            map(xs[0], sigmoid)
        }
        Primitive::Swish => {
            arity(1)?;
            map(xs[0], |v| v * sigmoid(v))
        }
        Primitive::Relu => {
            arity(1)?;
            map(xs[0], |v| v.max(R::zero()))
        }
        Primitive::Softmax => {
            arity(1)?;
            let x = xs[0];
            let n = *x.shape().last().ok_or_else(|| shape_err(op, "scalar input".into()))?;
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks_exact(n) {
                let m = row.iter().fold(R::neg_infinity(), |m, v| m.max(*v));
                let start = data.len();
                let mut z = R::zero();
                for v in row {
                    let e = (*v - m).portable_exp();
                    z = z + e;
                    data.push(e);
                }
                for v in &mut data[start..] {
                    *v = *v / z;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Primitive::TopK { k } => {
            arity(1)?;
            let x = xs[0];
            let n = *x.shape().last().ok_or_else(|| shape_err(op, "scalar input".into()))?;
            if *k == 0 || *k > n {
                return Err(shape_err(op, format!("k = {k} for last extent {n}")));
            }
            let mut sel = Vec::with_capacity(x.len() / n * k);
            let mut data = Vec::with_capacity(x.len() / n * k);
            for row in x.data().chunks_exact(n) {
                for c in top_k_indices(row, *k) {
                    sel.push(c);
                    data.push(row[c]);
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = *k;
            return Ok((Tensor::from_parts(shape, data), Some(sel.into())));
        }
        Primitive::Gather { index, shape } => {
            arity(1)?;
            let x = xs[0];
            if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= x.len()) {
                return Err(shape_err(op, format!("index of {} into {:?} as {shape:?}", index.len(), x.shape())));
            }
            Tensor::from_parts(shape.clone(), index.iter().map(|&i| x.data()[i]).collect())
        }
        Primitive::GatherRows { index } => {
            arity(1)?;
            let x = xs[0];
            if x.rank() != 2 || index.is_empty() || index.iter().any(|&r| r >= x.shape()[0]) {
                return Err(shape_err(op, format!("{} rows from {:?}", index.len(), x.shape())));
            }
            let n = x.shape()[1];
            let mut data = Vec::with_capacity(index.len() * n);
            for &r in index.iter() {
                data.extend_from_slice(&x.data()[r * n..(r + 1) * n]);
            }
            Tensor::from_parts(vec![index.len(), n], data)
        }
        Primitive::ScatterRows { index, rows } => {
            arity(1)?;
            let x = xs[0];
            if x.rank() != 2 || x.shape()[0] != index.len() || index.iter().any(|r| r >= rows) {
                return Err(shape_err(op, format!("{:?} into {rows} rows", x.shape())));
            }
            let n = x.shape()[1];
            let mut data = vec![R::zero(); rows * n];
            for (src, &r) in x.data().chunks_exact(n).zip(index.iter()) {
                for (d, s) in data[r * n..(r + 1) * n].iter_mut().zip(src) {
                    *d = *d + *s;
                }
            }
            Tensor::from_parts(vec![*rows, n], data)
        }
        Primitive::MeanAxis { axis } => {
            arity(1)?;
            let x = xs[0];
            if *axis >= x.rank() {
                return Err(shape_err(op, format!("axis {axis} of {:?}", x.shape())));
            }
            let (outer, ext, inner) = Tensor::<R>::axis_split(x.shape(), *axis);
            let inv = R::one() / R::of(ext as f64);
            let mut data = vec![R::zero(); outer * inner];
            for o in 0..outer {
                let acc = &mut data[o * inner..(o + 1) * inner];
                for a in 0..ext {
                    let src = &x.data()[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                    for (d, s) in acc.iter_mut().zip(src) {
                        *d = *d + *s;
                    }
                }
                for d in acc.iter_mut() {
                    *d = *d * inv;
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            Tensor::from_parts(shape, data)
        }
        Primitive::Sum => {
            arity(1)?;
            Tensor::scalar(xs[0].data().iter().fold(R::zero(), |s, v| s + *v))
        }
        Primitive::RmsNorm { eps } => {
            arity(2)?;
            let (x, gain) = (xs[0], xs[1]);
            if gain.rank() != 1 || x.shape().last() != Some(&gain.len()) {
                return Err(shape_err(op, format!("{:?} with gain {:?}", x.shape(), gain.shape())));
            }
            Tensor::from_parts(x.shape().to_vec(), rmsnorm_rows(x.data(), gain.data(), R::of(*eps)))
        }
        Primitive::Bce { labels } => {
            arity(1)?;
            let z = xs[0];
            if z.len() != labels.len() {
                return Err(shape_err(op, format!("{} logits vs {} labels", z.len(), labels.len())));
            }
            let mut total = R::zero();
            for (&z, &t) in z.data().iter().zip(labels.iter()) {
                // max(z, 0) - z t + ln(1 + e^{-|z|})
                let t = R::of(t);
                total = total + z.max(R::zero()) - z * t + (R::one() + (-z.abs()).portable_exp()).portable_ln();
            }
            Tensor::scalar(total / R::of(z.len() as f64))
        }
        Primitive::Fp8RoundTrip => {
            arity(1)?;
            let q = fp8::QuantTensor::quantize(xs[0])?;
            q.dequantize()
        }
        Primitive::Detach => {
            arity(1)?;
            xs[0].clone()
        }
    };
    Ok((out, None))
}

#[inline]
fn map<R: Real>(x: &Tensor<R>, f: impl Fn(R) -> R) -> Tensor<R> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub(crate) fn rmsnorm_rows<R: Real>(x: &[R], gain: &[R], eps: R) -> Vec<R> {
    let n = gain.len();
    let nr = R::of(n as f64);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let ms = row.iter().fold(R::zero(), |s, v| s + *v * *v) / nr;
        let inv = R::one() / (ms + eps).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| *v * *g * inv));
    }
    out
}
