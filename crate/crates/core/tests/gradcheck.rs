use tokenmixer_core::data::{generate, SyntheticSpec};
use tokenmixer_core::gradcheck::{check_model, primitive_suite, DEFAULT_STEP};
use tokenmixer_core::init::InitScales;
use tokenmixer_core::model::{Model, ModelConfig};
use tokenmixer_core::moe::MoeConfig;
use tokenmixer_core::norm::NormPlacement;

fn toy_data() -> (SyntheticSpec, Vec<u32>, Vec<f64>) {
    let spec = SyntheticSpec {
        groups: 3,
        train_examples: 4,
        eval_examples: 4,
        pairs: 2,
        emb_dim: 3,
        cardinality: 4,
        ..SyntheticSpec::default()
    };
    let d = generate(&spec).unwrap();
    let (ids, labels) = d.train.gather(&[0, 1, 2, 3]);
    (spec, ids, labels)
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        dim: 4,
        heads: 2,
        layers: 3,
        interval: 2,
        init: InitScales::BASE,
        ..ModelConfig::default()
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..3 {
        for (name, r) in primitive_suite(seed).unwrap() {
            assert!(r.max_rel_err < 1e-6, "{name}: {r:?}");
            assert!(r.checked > 0, "{name}");
        }
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let (spec, ids, labels) = toy_data();
    let variants = [
        toy_model(),
        ModelConfig {
            norm: NormPlacement::Sandwich,
            ..toy_model()
        },
        ModelConfig {
            moe: Some(MoeConfig::default()),
            ..toy_model()
        },
    ];
    for cfg in variants {
        let (model, params) = Model::build::<f64>(&spec.features(), &cfg).unwrap();
        let r = check_model(&model, &params, &ids, &labels, DEFAULT_STEP).unwrap();
        assert_eq!(r.checked, params.iter().map(|(_, p)| p.value.len()).sum::<usize>());
        assert!(r.max_rel_err < 1e-4, "{cfg:?}: {r:?}");
    }
}
