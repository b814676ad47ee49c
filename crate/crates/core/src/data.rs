//! Synthetic click data from a planted logistic model with main effects and
//! cross-group pairwise interactions.
//!
//! Every feature value carries a scalar main effect and a latent vector; a
//! fixed set of feature pairs from different groups contributes the dot
//! product of their latent vectors. Labels are Bernoulli draws of
//! `sigmoid(score + noise)`. The planted model and the examples come from
//! independent random streams of one seed.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auc, expected_auc};
use crate::real::sigmoid;
use crate::tokenize::FeatureSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub features_per_group: usize,
    pub cardinality: usize,
    /// Embedding width the model uses for every feature.
    pub emb_dim: usize,
    /// Latent width of the planted interactions.
    pub rank: usize,
    pub main_scale: f64,
    /// Number of interacting cross-group feature pairs.
    pub pairs: usize,
    pub pair_scale: f64,
    /// Standard deviation of Gaussian noise added to the score before the
    /// label draw.
    pub noise: f64,
    /// Target mean click probability used to place the intercept.
    pub positive_rate: f64,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            groups: 7,
            features_per_group: 1,
            cardinality: 8,
            emb_dim: 8,
            rank: 4,
            main_scale: 0.5,
            pairs: 4,
            pair_scale: 1.0,
            noise: 0.0,
            positive_rate: 0.3,
            train_examples: 65_536,
            eval_examples: 8_192,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn feature_count(&self) -> usize {
        self.groups * self.features_per_group
    }

    pub fn features(&self) -> Vec<FeatureSpec> {
        (0..self.feature_count())
            .map(|f| FeatureSpec {
                name: format!("g{}f{}", f / self.features_per_group, f % self.features_per_group),
                cardinality: self.cardinality,
                emb_dim: self.emb_dim,
                group: f / self.features_per_group,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.groups == 0 || self.features_per_group == 0 || self.cardinality == 0 || self.emb_dim == 0 {
            return bad("groups, features, cardinality and emb_dim must be positive");
        }
        if self.pairs > 0 && (self.groups < 2 || self.rank == 0) {
            return bad("interactions need two groups and a positive rank");
        }
        let fpg = self.features_per_group;
        let nf = self.feature_count();
        let cross = nf * (nf - 1) / 2 - self.groups * fpg * (fpg - 1) / 2;
        if self.pairs > cross {
            return bad("more interaction pairs than distinct cross-group feature pairs");
        }
        if !(self.positive_rate > 0.05 && self.positive_rate < 0.95) {
            return bad("positive_rate must lie in (0.05, 0.95)");
        }
        if !(self.noise >= 0.0 && self.main_scale >= 0.0 && self.pair_scale >= 0.0) {
            return bad("scales must be non-negative");
        }
        Ok(())
    }
}

/// Ground-truth scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedModel {
    pub intercept: f64,
    /// `main[f][v]`
    pub main: Vec<Vec<f64>>,
    /// `latent[f][v]` of length `rank`
    pub latent: Vec<Vec<Vec<f64>>>,
    /// `(f1, f2, weight)` with features from different groups.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl PlantedModel {
    pub fn sample(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(spec.seed, 0);
        let nf = spec.feature_count();
        let main_dist = Normal::new(0.0, spec.main_scale.max(0.0)).map_err(|_| Error::Config("main_scale".into()))?;
        let main = (0..nf)
            .map(|_| (0..spec.cardinality).map(|_| main_dist.sample(&mut rng)).collect())
            .collect();
        let inv = 1.0 / libm::sqrt(spec.rank.max(1) as f64);
        let latent = (0..nf)
            .map(|_| {
                (0..spec.cardinality)
                    .map(|_| {
                        (0..spec.rank)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                inv * z
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut pairs = Vec::with_capacity(spec.pairs);
        while pairs.len() < spec.pairs {
            let a = rng.random_range(0..nf);
            let b = rng.random_range(0..nf);
            let (a, b) = (a.min(b), a.max(b));
            if a / spec.features_per_group == b / spec.features_per_group
                || pairs.iter().any(|&(x, y, _)| (x, y) == (a, b))
            {
                continue;
            }
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            pairs.push((a, b, sign * spec.pair_scale));
        }
        let mut model = PlantedModel {
            intercept: 0.0,
            main,
            latent,
            pairs,
        };
        model.intercept = model.fit_intercept(spec, &mut stream(spec.seed, 3));
        Ok(model)
    }

    /// Intercept putting the mean click probability at the target rate on a
    /// pilot sample, found by bisection.
    fn fit_intercept(&self, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> f64 {
        let nf = spec.feature_count();
        let pilot: Vec<f64> = (0..4096)
            .map(|_| {
                let ids: Vec<u32> = (0..nf).map(|_| rng.random_range(0..spec.cardinality) as u32).collect();
                self.score_without_intercept(&ids)
            })
            .collect();
        let rate = |b: f64| pilot.iter().map(|s| sigmoid(s + b)).sum::<f64>() / pilot.len() as f64;
        let (mut lo, mut hi) = (-50.0, 50.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if rate(mid) < spec.positive_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn score_without_intercept(&self, ids: &[u32]) -> f64 {
        let mut s = 0.0;
        for (f, &v) in ids.iter().enumerate() {
            s += self.main[f][v as usize];
        }
        for &(a, b, w) in &self.pairs {
            let (u, v) = (&self.latent[a][ids[a] as usize], &self.latent[b][ids[b] as usize]);
            s += w * u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        }
        s
    }

    /// Noise-free logit of one example.
    pub fn score(&self, ids: &[u32]) -> f64 {
        self.intercept + self.score_without_intercept(ids)
    }
}

/// Examples in row-major `[rows, features]` id layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub ids: Vec<u32>,
    pub labels: Vec<f64>,
    /// Planted noise-free logits.
    pub oracle: Vec<f64>,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row_ids(&self, r: usize) -> &[u32] {
        &self.ids[r * self.features..(r + 1) * self.features]
    }

    /// Rows `index` gathered into a batch `(ids, labels)`.
    pub fn gather(&self, index: &[usize]) -> (Vec<u32>, Vec<f64>) {
        let mut ids = Vec::with_capacity(index.len() * self.features);
        let mut labels = Vec::with_capacity(index.len());
        for &r in index {
            ids.extend_from_slice(self.row_ids(r));
            labels.push(self.labels[r]);
        }
        (ids, labels)
    }

    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().sum::<f64>() / self.rows().max(1) as f64
    }

    /// Empirical AUC of the planted score on these labels.
    pub fn oracle_auc(&self) -> Result<f64> {
        auc(&self.oracle, &self.labels)
    }

    /// Expected AUC of the planted score under its own (noise-free) click
    /// probabilities.
    pub fn analytic_ceiling(&self) -> f64 {
        let p: Vec<f64> = self.oracle.iter().map(|&s| sigmoid(s)).collect();
        expected_auc(&self.oracle, &p)
    }
}

/// Train and held-out sets plus the planted model.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub spec: SyntheticSpec,
    pub planted: PlantedModel,
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    let planted = PlantedModel::sample(spec)?;
    let train = draw(spec, &planted, spec.train_examples, &mut stream(spec.seed, 1))?;
    let eval = draw(spec, &planted, spec.eval_examples, &mut stream(spec.seed, 2))?;
    Ok(Synthetic {
        spec: spec.clone(),
        planted,
        train,
        eval,
    })
}

impl Synthetic {
    /// A further held-out set from the same planted model, drawn from a
    /// stream the train and eval sets never use.
    pub fn fresh_eval(&self, rows: usize, seed: u64) -> Result<Dataset> {
        let key = self.spec.seed.wrapping_add(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        draw(&self.spec, &self.planted, rows, &mut stream(key, 4))
    }
}

fn draw(spec: &SyntheticSpec, planted: &PlantedModel, rows: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let nf = spec.feature_count();
    let noise = if spec.noise > 0.0 {
        Some(Normal::new(0.0, spec.noise).map_err(|_| Error::Config("noise".into()))?)
    } else {
        None
    };
    let mut ids = Vec::with_capacity(rows * nf);
    let mut labels = Vec::with_capacity(rows);
    let mut oracle = Vec::with_capacity(rows);
    for _ in 0..rows {
        let start = ids.len();
        for _ in 0..nf {
            ids.push(rng.random_range(0..spec.cardinality) as u32);
        }
        let s = planted.score(&ids[start..]);
        let z = s + noise.as_ref().map_or(0.0, |n| n.sample(rng));
        let u: f64 = rng.random();
        labels.push(if u < sigmoid(z) { 1.0 } else { 0.0 });
        oracle.push(s);
    }
    let data = Dataset {
        features: nf,
        ids,
        labels,
        oracle,
    };
    let rate = data.positive_rate();
    if rows >= 100 && !(rate > 0.05 && rate < 0.95) {
        return Err(Error::Config(format!("positive rate {rate} outside (0.05, 0.95)")));
    }
    Ok(data)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            features_per_group: 2,
            pairs: 8,
            train_examples: 2000,
            eval_examples: 500,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn fresh_eval_differs_from_eval() {
        let d = generate(&small()).unwrap();
        let a = d.fresh_eval(500, 1).unwrap();
        assert_eq!(a, d.fresh_eval(500, 1).unwrap());
        assert_ne!(a.ids, d.eval.ids);
        assert_ne!(a.ids, d.fresh_eval(500, 2).unwrap().ids);
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn positive_rate_near_target() {
        let d = generate(&small()).unwrap();
        assert!((d.train.positive_rate() - 0.3).abs() < 0.05);
    }

    #[test]
    fn pairs_cross_groups() {
        let d = generate(&small()).unwrap();
        let fpg = d.spec.features_per_group;
        assert_eq!(d.planted.pairs.len(), d.spec.pairs);
        for &(a, b, _) in &d.planted.pairs {
            assert_ne!(a / fpg, b / fpg);
        }
    }

    #[test]
    fn train_and_eval_differ() {
        let d = generate(&small()).unwrap();
        assert_ne!(d.train.ids[..100], d.eval.ids[..100]);
    }
}
