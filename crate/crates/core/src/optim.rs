use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const ADAGRAD_EPS: f64 = 1e-10;

/// Adagrad with separate learning rates for embedding tables and every
/// other (dense) parameter. Accumulators start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad<R> {
    pub dense_lr: f64,
    pub sparse_lr: f64,
    pub eps: f64,
    acc: Vec<Tensor<R>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub dense: f64,
    pub sparse: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            dense: 0.01,
            sparse: 0.05,
        }
    }
}

impl<R: Real> Adagrad<R> {
    pub fn new(params: &ParamStore<R>, lr: LearningRates) -> Self {
        Adagrad {
            dense_lr: lr.dense,
            sparse_lr: lr.sparse,
            eps: ADAGRAD_EPS,
            acc: params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect(),
        }
    }

    /// `acc += g^2; p -= lr * g / sqrt(acc + eps)`. A non-finite gradient
    /// rejects the whole step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<R>, grads: &[Tensor<R>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Config("gradient list does not match parameters".into()));
        }
        for ((_, p), g) in params.iter().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { param: p.name.clone() });
            }
            if g.shape() != p.value.shape() {
                return Err(crate::error::shape_err("adagrad", alloc::format!("gradient for `{}`", p.name)));
            }
        }
        let eps = R::of(self.eps);
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.acc) {
            let lr = R::of(if p.role.is_sparse() { self.sparse_lr } else { self.dense_lr });
            for ((w, &gv), a) in p.value.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
                if gv == R::zero() {
                    continue;
                }
                *a = *a + gv * gv;
                *w = *w - lr * gv / (*a + eps).sqrt();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    fn store(role: ParamRole) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("w", role, Tensor::from_f64([1], &[0.0]).unwrap());
        s
    }

    #[test]
    fn closed_form_steps() {
        let mut p = store(ParamRole::Up);
        let mut opt = Adagrad::new(&p, LearningRates::default());
        let g = [Tensor::from_f64([1], &[1.0]).unwrap()];
        opt.step(&mut p, &g).unwrap();
        let first = p.value(crate::params::ParamId(0)).item();
        assert_eq!(first, -0.01 / libm::sqrt(1.0 + 1e-10));
        opt.step(&mut p, &g).unwrap();
        let second = p.value(crate::params::ParamId(0)).item() - first;
        assert!((second + 0.01 / libm::sqrt(2.0 + 1e-10)).abs() < 1e-16);
        assert!((second + 0.01 / libm::sqrt(2.0)).abs() < 1e-12);
    }

    #[test]
    fn sparse_rate_for_embeddings() {
        let mut p = store(ParamRole::Embedding);
        let mut opt = Adagrad::new(&p, LearningRates::default());
        opt.step(&mut p, &[Tensor::from_f64([1], &[2.0]).unwrap()]).unwrap();
        assert!((p.value(crate::params::ParamId(0)).item() + 0.05).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_and_non_finite() {
        let mut p = store(ParamRole::Up);
        let mut opt = Adagrad::new(&p, LearningRates::default());
        opt.step(&mut p, &[Tensor::zeros([1])]).unwrap();
        assert_eq!(p.value(crate::params::ParamId(0)).item(), 0.0);
        let bad = [Tensor::from_f64([1], &[f64::NAN]).unwrap()];
        assert!(matches!(opt.step(&mut p, &bad), Err(Error::NonFiniteGradient { .. })));
    }
}
