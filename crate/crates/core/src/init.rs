use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::Tensor;

pub type ModelRng = ChaCha8Rng;

pub fn rng(seed: u64) -> ModelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Xavier-normal kernel `[n_in, n_out]` with variance `2 * scale / (n_in + n_out)`.
pub fn xavier_normal<R: Real>(rng: &mut impl Rng, n_in: usize, n_out: usize, scale: f64) -> Tensor<R> {
    let var = 2.0 * scale / (n_in + n_out) as f64;
    normal([n_in, n_out], libm::sqrt(var), rng)
}

pub fn normal<R: Real, const N: usize>(shape: [usize; N], std: f64, rng: &mut impl Rng) -> Tensor<R> {
    if std == 0.0 {
        return Tensor::zeros(shape.to_vec());
    }
    let dist = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(shape.to_vec(), |_| R::of(dist.sample(rng)))
}

/// Xavier scale for the `[up, gate, down]` kernels of every SwiGLU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScales {
    pub up: f64,
    pub gate: f64,
    pub down: f64,
}

impl Default for InitScales {
    fn default() -> Self {
        InitScales::SMALL_DOWN
    }
}

impl InitScales {
    pub const BASE: InitScales = InitScales::new(1.0, 1.0, 1.0);
    pub const SMALL_DOWN: InitScales = InitScales::new(1.0, 1.0, 0.01);
    pub const SMALL_DOWN_01: InitScales = InitScales::new(1.0, 1.0, 0.1);
    pub const SMALL_ALL: InitScales = InitScales::new(0.01, 0.01, 0.01);
    pub const SMALL_REVERSE: InitScales = InitScales::new(0.01, 0.01, 1.0);

    pub const fn new(up: f64, gate: f64, down: f64) -> Self {
        InitScales { up, gate, down }
    }

    /// The small-initialization grid as `(name, scales)`.
    pub fn presets() -> [(&'static str, InitScales); 5] {
        [
            ("base", Self::BASE),
            ("small-init-001", Self::SMALL_DOWN),
            ("small-init-01", Self::SMALL_DOWN_01),
            ("small-init-001-all", Self::SMALL_ALL),
            ("small-init-001-reverse", Self::SMALL_REVERSE),
        ]
    }
}
