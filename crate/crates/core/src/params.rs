use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// What a parameter does; drives learning-rate groups and FP8 pre-quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Embedding,
    Projection,
    Up,
    Gate,
    Down,
    Router,
    NormGain,
    Head,
    HeadBias,
}

impl ParamRole {
    /// Embedding tables are the sparse part of the model.
    pub fn is_sparse(self) -> bool {
        matches!(self, ParamRole::Embedding)
    }

    /// Feed-forward kernels, stored in FP8 on the quantized inference path.
    pub fn is_ffn_weight(self) -> bool {
        matches!(self, ParamRole::Up | ParamRole::Gate | ParamRole::Down)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<R>,
}

/// Flat, ordered parameter storage. Model structures refer to entries by
/// [`ParamId`]; optimizers and checkpoints walk the list in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R> {
    params: Vec<Param<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor<R>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            role,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<R> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self, filter: impl Fn(&Param<R>) -> bool) -> usize {
        self.params.iter().filter(|p| filter(p)).map(|p| p.value.len()).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}
