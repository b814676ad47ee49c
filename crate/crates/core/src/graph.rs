use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::fp8;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One forward (and optional backward) evaluation: a tape plus lazily bound
/// parameters.
pub struct Graph<'p, R: Real> {
    pub tape: Tape<R>,
    params: &'p ParamStore<R>,
    bound: Vec<Option<Var>>,
    trainable: bool,
    fp8: bool,
}

impl<'p, R: Real> Graph<'p, R> {
    pub fn new(params: &'p ParamStore<R>, trainable: bool) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
            fp8: false,
        }
    }

    /// Inference with FP8 E4M3 weights for feed-forward kernels and
    /// quantized activations at every [`Graph::quant_point`].
    pub fn with_fp8(mut self, on: bool) -> Self {
        self.fp8 = on;
        self
    }

    pub fn fp8(&self) -> bool {
        self.fp8
    }

    pub fn params(&self) -> &'p ParamStore<R> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let p = self.params.get(id);
        let value = if self.fp8 && p.role.is_ffn_weight() {
            fp8::round_trip(&p.value)?
        } else {
            p.value.clone()
        };
        let v = self.tape.leaf(value, self.trainable);
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Activation quantization boundary; identity unless FP8 is on.
    pub fn quant_point(&mut self, x: Var) -> Result<Var> {
        if self.fp8 {
            self.tape.fp8_round_trip(x)
        } else {
            Ok(x)
        }
    }

    /// Gradients for every stored parameter, zero for those never bound.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor<R>>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .params
            .iter()
            .map(|(id, p)| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
            })
            .collect())
    }
}
