//! Parameter-free mixing of `T` tokens into `H` positions and its inverse.
//!
//! Every token of width `D` is cut into `H` chunks of width `D / H`. Mixed
//! position `h` is the concatenation, over segments, of one chunk each. For
//! the vertical, diagonal and random strategies segment `s` is token `s`, so
//! each mixed position sees every original token exactly once. The
//! half-tokens strategy is the deliberate counter-example: a position only
//! sees half of the tokens (two chunks from each).

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::init;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixStrategy {
    /// Position `h` takes chunk `h` of every token.
    #[default]
    Vertical,
    /// Position `h` takes chunk `(t + h) mod H` of token `t`.
    Diagonal,
    /// Position `h` takes chunk `pi_t(h)` of token `t` for seeded bijections `pi_t`.
    Random,
    /// Negative control: each position covers only half of the tokens.
    HalfTokens,
}

impl MixStrategy {
    /// Whether every mixed position carries one chunk of every token.
    pub fn covers_all_tokens(self) -> bool {
        !matches!(self, MixStrategy::HalfTokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixConfig {
    pub heads: usize,
    pub strategy: MixStrategy,
    #[serde(default)]
    pub seed: u64,
}

impl MixConfig {
    pub fn new(heads: usize, strategy: MixStrategy) -> Self {
        MixConfig {
            heads,
            strategy,
            seed: 0,
        }
    }
}

/// Precomputed rearrangement for fixed `(T, D, H, strategy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixLayout {
    tokens: usize,
    dim: usize,
    heads: usize,
    chunk: usize,
    /// `(token, chunk)` feeding segment `s` of position `h`, at `h * T + s`.
    source: Vec<(usize, usize)>,
    /// Flat per-example map: mixed element `j` reads token-matrix element `map[j]`.
    map: Vec<usize>,
    inverse: Vec<usize>,
    strategy: MixStrategy,
}

impl MixLayout {
    pub fn new(tokens: usize, dim: usize, cfg: &MixConfig) -> Result<Self> {
        let heads = cfg.heads;
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Divisibility {
                what: "token width D",
                value: dim,
                by: heads,
            });
        }
        if tokens == 0 {
            return Err(Error::Config("mixing needs at least one token".into()));
        }
        let chunk = dim / heads;
        let mut source = vec![(0, 0); heads * tokens];
        match cfg.strategy {
            MixStrategy::Vertical => {
                for h in 0..heads {
                    for t in 0..tokens {
                        source[h * tokens + t] = (t, h);
                    }
                }
            }
            MixStrategy::Diagonal => {
                for h in 0..heads {
                    for t in 0..tokens {
                        source[h * tokens + t] = (t, (t + h) % heads);
                    }
                }
            }
            MixStrategy::Random => {
                let mut rng = init::rng(cfg.seed);
                for t in 0..tokens {
                    let mut perm: Vec<usize> = (0..heads).collect();
                    perm.shuffle(&mut rng);
                    for h in 0..heads {
                        source[h * tokens + t] = (t, perm[h]);
                    }
                }
            }
            MixStrategy::HalfTokens => {
                if !tokens.is_multiple_of(2) || !heads.is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "half-token mixing needs even T and H (T = {tokens}, H = {heads})"
                    )));
                }
                let (half_t, half_h) = (tokens / 2, heads / 2);
                for h in 0..heads {
                    let group = h / half_h;
                    let local = h % half_h;
                    for s in 0..tokens {
                        source[h * tokens + s] = (group * half_t + s / 2, 2 * local + s % 2);
                    }
                }
            }
        }
        let width = tokens * chunk;
        let mut map = vec![0; tokens * dim];
        for h in 0..heads {
            for s in 0..tokens {
                let (t, c) = source[h * tokens + s];
                for o in 0..chunk {
                    map[h * width + s * chunk + o] = t * dim + c * chunk + o;
                }
            }
        }
        let mut inverse = vec![usize::MAX; map.len()];
        for (j, &src) in map.iter().enumerate() {
            inverse[src] = j;
        }
        if inverse.contains(&usize::MAX) {
            return Err(Error::Config("mixing layout is not a bijection".into()));
        }
        Ok(MixLayout {
            tokens,
            dim,
            heads,
            chunk,
            source,
            map,
            inverse,
            strategy: cfg.strategy,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Width `D / H` of one chunk.
    pub fn chunk(&self) -> usize {
        self.chunk
    }

    /// Width `T * D / H` of one mixed position.
    pub fn width(&self) -> usize {
        self.tokens * self.chunk
    }

    pub fn strategy(&self) -> MixStrategy {
        self.strategy
    }

    /// `(token, chunk)` stored at segment `s` of position `h`.
    pub fn source(&self, h: usize, s: usize) -> (usize, usize) {
        self.source[h * self.tokens + s]
    }

    /// Per-example gather map of [`MixLayout::mix`] over a flattened `T*D` token row.
    pub fn map(&self) -> &[usize] {
        &self.map
    }

    /// Per-example gather map of [`MixLayout::revert`].
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    fn batched(&self, map: &[usize], batch: usize) -> Arc<[usize]> {
        let per = map.len();
        let mut idx = Vec::with_capacity(per * batch);
        for b in 0..batch {
            idx.extend(map.iter().map(|&i| b * per + i));
        }
        idx.into()
    }

    fn check(&self, shape: &[usize], rows: usize, cols: usize, op: &'static str) -> Result<usize> {
        if shape.len() != 3 || shape[1] != rows || shape[2] != cols {
            return Err(shape_err(
                op,
                format!("expected [B, {rows}, {cols}], got {shape:?}"),
            ));
        }
        Ok(shape[0])
    }

    /// `[B, T, D] -> [B, H, T*D/H]` on the tape.
    pub fn mix<R: Real>(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let b = self.check(tape.shape(x), self.tokens, self.dim, "mix")?;
        let idx = self.batched(&self.map, b);
        tape.gather(x, idx, &[b, self.heads, self.width()])
    }

    /// `[B, H, T*D/H] -> [B, T, D]` on the tape; exact inverse of [`MixLayout::mix`].
    pub fn revert<R: Real>(&self, tape: &mut Tape<R>, h: Var) -> Result<Var> {
        let b = self.check(tape.shape(h), self.heads, self.width(), "revert")?;
        let idx = self.batched(&self.inverse, b);
        tape.gather(h, idx, &[b, self.tokens, self.dim])
    }

    pub fn mix_tensor<R: Real>(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let b = self.check(x.shape(), self.tokens, self.dim, "mix")?;
        let idx = self.batched(&self.map, b);
        Tensor::new([b, self.heads, self.width()], idx.iter().map(|&i| x.data()[i]).collect())
    }

    pub fn revert_tensor<R: Real>(&self, h: &Tensor<R>) -> Result<Tensor<R>> {
        let b = self.check(h.shape(), self.heads, self.width(), "revert")?;
        let idx = self.batched(&self.inverse, b);
        Tensor::new([b, self.tokens, self.dim], idx.iter().map(|&i| h.data()[i]).collect())
    }
}

/// `mix(X)` for a `[B, T, D]` tensor.
pub fn mix<R: Real>(x: &Tensor<R>, cfg: &MixConfig) -> Result<Tensor<R>> {
    if x.rank() != 3 {
        return Err(shape_err("mix", format!("expected [B, T, D], got {:?}", x.shape())));
    }
    MixLayout::new(x.shape()[1], x.shape()[2], cfg)?.mix_tensor(x)
}

/// `revert(H)` for a `[B, H, T*D/H]` tensor originally mixed from `tokens` tokens.
pub fn revert<R: Real>(h: &Tensor<R>, tokens: usize, cfg: &MixConfig) -> Result<Tensor<R>> {
    if h.rank() != 3 || !(h.shape()[2] * cfg.heads).is_multiple_of(tokens) {
        return Err(shape_err("revert", format!("{:?} for {tokens} tokens", h.shape())));
    }
    let dim = h.shape()[2] * cfg.heads / tokens;
    MixLayout::new(tokens, dim, cfg)?.revert_tensor(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> Tensor<f64> {
        // a1..a4 = 11..14, b1..b4 = 21..24
        Tensor::new([1, 2, 4], vec![11.0, 12.0, 13.0, 14.0, 21.0, 22.0, 23.0, 24.0]).unwrap()
    }

    #[test]
    fn vertical_hand_trace() {
        let cfg = MixConfig::new(2, MixStrategy::Vertical);
        let h = mix(&example(), &cfg).unwrap();
        assert_eq!(h.shape(), &[1, 2, 4]);
        assert_eq!(h.data(), &[11.0, 12.0, 21.0, 22.0, 13.0, 14.0, 23.0, 24.0]);
        assert_eq!(revert(&h, 2, &cfg).unwrap(), example());
    }

    #[test]
    fn diagonal_hand_trace() {
        let cfg = MixConfig::new(2, MixStrategy::Diagonal);
        let h = mix(&example(), &cfg).unwrap();
        // position 0: chunk 0 of a, chunk 1 of b; position 1: chunk 1 of a, chunk 0 of b
        assert_eq!(h.data(), &[11.0, 12.0, 23.0, 24.0, 13.0, 14.0, 21.0, 22.0]);
    }

    #[test]
    fn single_head_flattens() {
        for strategy in [MixStrategy::Vertical, MixStrategy::Diagonal, MixStrategy::Random] {
            let h = mix(&example(), &MixConfig::new(1, strategy)).unwrap();
            assert_eq!(h.shape(), &[1, 1, 8]);
            assert_eq!(h.data(), example().data());
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let h = mix(&Tensor::<f64>::zeros([3, 4, 8]), &MixConfig::new(4, MixStrategy::Random)).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divisibility_checked() {
        assert!(matches!(
            mix(&example(), &MixConfig::new(3, MixStrategy::Vertical)),
            Err(Error::Divisibility { .. })
        ));
    }

    #[test]
    fn double_mix_double_revert() {
        let x = Tensor::<f64>::from_fn([2, 2, 4], |i| i as f64 * 0.5 - 3.0);
        let cfg = MixConfig::new(2, MixStrategy::Vertical);
        let once = mix(&x, &cfg).unwrap();
        let twice = mix(&once, &cfg).unwrap();
        let back = revert(&revert(&twice, 2, &cfg).unwrap(), 2, &cfg).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn coverage_per_strategy() {
        for strategy in [MixStrategy::Vertical, MixStrategy::Diagonal, MixStrategy::Random] {
            let layout = MixLayout::new(6, 12, &MixConfig { heads: 4, strategy, seed: 9 }).unwrap();
            for h in 0..4 {
                let mut seen: Vec<usize> = (0..6).map(|s| layout.source(h, s).0).collect();
                seen.sort_unstable();
                assert_eq!(seen, (0..6).collect::<Vec<_>>());
            }
        }
        let half = MixLayout::new(4, 8, &MixConfig::new(4, MixStrategy::HalfTokens)).unwrap();
        for h in 0..4 {
            let mut tokens: Vec<usize> = (0..4).map(|s| half.source(h, s).0).collect();
            tokens.dedup();
            assert_eq!(tokens.len(), 2);
        }
    }
}
