//! Semantic-group tokenizer: embedding lookup, one projection per feature
//! group to width `D`, and an optional global token projected from every
//! embedding, placed at token 0.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init::{normal, xavier_normal};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::real::Real;
use crate::tape::Var;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub cardinality: usize,
    pub emb_dim: usize,
    pub group: usize,
}

/// Number of semantic groups, checking that ids are dense from zero.
pub fn group_count(features: &[FeatureSpec]) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::Config("no features declared".into()));
    }
    let groups = features.iter().map(|f| f.group).max().unwrap_or(0) + 1;
    for g in 0..groups {
        if !features.iter().any(|f| f.group == g) {
            return Err(Error::Config(format!("feature group {g} is empty")));
        }
    }
    for f in features {
        if f.cardinality == 0 || f.emb_dim == 0 {
            return Err(Error::Config(format!(
                "feature `{}` needs positive cardinality and emb_dim",
                f.name
            )));
        }
    }
    Ok(groups)
}

/// Bias-free projection: one linear map, or two with Swish in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub layers: Vec<ParamId>,
}

impl Projection {
    fn init<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
        depth: usize,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut width = n_in;
        for l in 0..depth {
            layers.push(store.push(
                format!("{name}.{l}"),
                ParamRole::Projection,
                xavier_normal(rng, width, n_out, 1.0),
            ));
            width = n_out;
        }
        Projection { layers }
    }

    fn forward<R: Real>(&self, g: &mut Graph<'_, R>, mut x: Var) -> Result<Var> {
        for (l, &w) in self.layers.iter().enumerate() {
            if l > 0 {
                x = g.tape.swish(x)?;
            }
            let w = g.param(w)?;
            x = g.tape.matmul(x, w)?;
        }
        Ok(x)
    }

    fn macs_per_row(&self, n_in: usize, n_out: usize) -> usize {
        n_in * n_out + (self.layers.len() - 1) * n_out * n_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub features: Vec<FeatureSpec>,
    pub tables: Vec<ParamId>,
    pub groups: Vec<Projection>,
    pub global: Option<Projection>,
    pub dim: usize,
}

impl Tokenizer {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        features: &[FeatureSpec],
        dim: usize,
        depth: usize,
        global_token: bool,
    ) -> Result<Self> {
        let groups = group_count(features)?;
        if !(1..=2).contains(&depth) {
            return Err(Error::Config(format!("tokenizer depth {depth} (expected 1 or 2)")));
        }
        let tables = features
            .iter()
            .map(|f| {
                let std = 1.0 / libm::sqrt(f.emb_dim as f64);
                store.push(
                    format!("embedding.{}", f.name),
                    ParamRole::Embedding,
                    normal([f.cardinality, f.emb_dim], std, rng),
                )
            })
            .collect();
        let group_width = |g: usize| features.iter().filter(|f| f.group == g).map(|f| f.emb_dim).sum();
        let projections = (0..groups)
            .map(|g| Projection::init(store, rng, &format!("tokenizer.group{g}"), group_width(g), dim, depth))
            .collect();
        let total: usize = features.iter().map(|f| f.emb_dim).sum();
        let global = global_token.then(|| Projection::init(store, rng, "tokenizer.global", total, dim, depth));
        Ok(Tokenizer {
            features: features.to_vec(),
            tables,
            groups: projections,
            global,
            dim,
        })
    }

    pub fn tokens(&self) -> usize {
        self.groups.len() + usize::from(self.global.is_some())
    }

    /// Row lookups: one `[rows, emb_dim]` tensor per feature. `ids` is
    /// row-major `[rows, features]`.
    pub fn embed<R: Real>(&self, g: &mut Graph<'_, R>, ids: &[u32], rows: usize) -> Result<Vec<Var>> {
        let nf = self.features.len();
        if ids.len() != rows * nf || rows == 0 {
            return Err(crate::error::shape_err(
                "embed",
                format!("{} ids for {rows} rows of {nf} features", ids.len()),
            ));
        }
        let mut out = Vec::with_capacity(nf);
        for (f, (spec, &table)) in self.features.iter().zip(&self.tables).enumerate() {
            let mut index = Vec::with_capacity(rows);
            for r in 0..rows {
                let id = ids[r * nf + f];
                if id as usize >= spec.cardinality {
                    return Err(Error::Lookup {
                        feature: spec.name.clone(),
                        id,
                        cardinality: spec.cardinality,
                    });
                }
                index.push(id as usize);
            }
            let t = g.param(table)?;
            out.push(g.tape.gather_rows(t, Arc::from(index))?);
        }
        Ok(out)
    }

    /// `[rows, T, D]` with the global token first.
    pub fn tokenize<R: Real>(&self, g: &mut Graph<'_, R>, embeddings: &[Var]) -> Result<Var> {
        if embeddings.len() != self.features.len() {
            return Err(Error::Config(format!(
                "tokenize got {} embeddings for {} features",
                embeddings.len(),
                self.features.len()
            )));
        }
        for (e, spec) in embeddings.iter().zip(&self.features) {
            if g.tape.shape(*e).get(1) != Some(&spec.emb_dim) {
                return Err(crate::error::shape_err(
                    "tokenize",
                    format!("feature `{}` embedding {:?}", spec.name, g.tape.shape(*e)),
                ));
            }
        }
        let rows = g.tape.shape(embeddings[0])[0];
        let mut tokens = Vec::with_capacity(self.tokens());
        if let Some(global) = &self.global {
            let all = g.tape.concat(embeddings, 1)?;
            tokens.push(global.forward(g, all)?);
        }
        for (gi, proj) in self.groups.iter().enumerate() {
            let members: Vec<Var> = self
                .features
                .iter()
                .zip(embeddings)
                .filter(|(f, _)| f.group == gi)
                .map(|(_, &e)| e)
                .collect();
            let x = g.tape.concat(&members, 1)?;
            tokens.push(proj.forward(g, x)?);
        }
        let flat = g.tape.concat(&tokens, 1)?;
        g.tape.reshape(flat, &[rows, tokens.len(), self.dim])
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, ids: &[u32], rows: usize) -> Result<Var> {
        let e = self.embed(g, ids, rows)?;
        self.tokenize(g, &e)
    }

    /// Forward projection multiply-adds per example.
    pub fn macs_per_row(&self) -> usize {
        let mut macs = 0;
        for (gi, p) in self.groups.iter().enumerate() {
            let w: usize = self.features.iter().filter(|f| f.group == gi).map(|f| f.emb_dim).sum();
            macs += p.macs_per_row(w, self.dim);
        }
        if let Some(p) = &self.global {
            let w: usize = self.features.iter().map(|f| f.emb_dim).sum();
            macs += p.macs_per_row(w, self.dim);
        }
        macs
    }
}

/// Mean over the token axis of `[rows, T, D]`.
pub fn mean_pool<R: Real>(g: &mut Graph<'_, R>, tokens: Var) -> Result<Var> {
    g.tape.mean_axis(tokens, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn features() -> Vec<FeatureSpec> {
        let f = |name: &str, card, d, group| FeatureSpec {
            name: name.into(),
            cardinality: card,
            emb_dim: d,
            group,
        };
        vec![f("a", 5, 2, 0), f("b", 3, 3, 0), f("c", 4, 2, 1), f("d", 6, 1, 2)]
    }

    #[test]
    fn token_count_and_shape() {
        let mut store = ParamStore::<f64>::new();
        let tok = Tokenizer::init(&mut store, &mut crate::init::rng(0), &features(), 4, 1, true).unwrap();
        assert_eq!(tok.tokens(), 4);
        let mut g = Graph::new(&store, false);
        let ids = [0, 1, 2, 3, 4, 2, 3, 5];
        let x = tok.forward(&mut g, &ids, 2).unwrap();
        assert_eq!(g.tape.shape(x), &[2, 4, 4]);
    }

    #[test]
    fn out_of_range_id_names_feature() {
        let mut store = ParamStore::<f64>::new();
        let tok = Tokenizer::init(&mut store, &mut crate::init::rng(0), &features(), 4, 1, true).unwrap();
        let mut g = Graph::new(&store, false);
        match tok.forward(&mut g, &[0, 3, 0, 0], 1) {
            Err(Error::Lookup { feature, id, cardinality }) => {
                assert_eq!((feature.as_str(), id, cardinality), ("b", 3, 3));
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn zero_embeddings_give_zero_tokens() {
        let mut store = ParamStore::<f64>::new();
        let tok = Tokenizer::init(&mut store, &mut crate::init::rng(0), &features(), 4, 2, true).unwrap();
        let mut g = Graph::new(&store, false);
        let e: Vec<Var> = features()
            .iter()
            .map(|f| g.tape.constant(Tensor::zeros([3, f.emb_dim])))
            .collect();
        let x = tok.tokenize(&mut g, &e).unwrap();
        assert!(g.tape.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_pool_two_tokens() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let x = g.tape.constant(Tensor::from_f64([1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let p = mean_pool(&mut g, x).unwrap();
        assert_eq!(g.tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn empty_group_rejected() {
        let mut f = features();
        f[3].group = 3;
        assert!(group_count(&f).is_err());
    }
}
