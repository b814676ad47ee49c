//! TokenMixer ranking model at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation: a small reverse-mode autodiff tape, the semantic-group
//! tokenizer, mixing/reverting blocks with per-token SwiGLU, the sparse
//! per-token mixture of experts, a deterministic simulator of the token
//! parallel sharding plan, a simulated FP8 E4M3 inference path, and the
//! training harness (synthetic data, Adagrad, AUC, FLOPs, ablation presets).
//!
//! File formats, the command line and threaded execution live in the
//! `tokenmixer` companion crate.
#![no_std]

extern crate alloc;

pub mod ablation;
pub mod block;
pub mod data;
pub mod error;
pub mod fidelity;
pub mod flops;
pub mod fp8;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod moe;
pub mod norm;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod real;
pub mod swiglu;
pub mod tape;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
