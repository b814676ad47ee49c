use tokenmixer_core::data::SyntheticSpec;
use tokenmixer_core::flops::random_ids;
use tokenmixer_core::mixing::MixStrategy;
use tokenmixer_core::model::{Model, ModelConfig};
use tokenmixer_core::moe::MoeConfig;
use tokenmixer_core::parallel::{max_deviation, run_parallel, run_serial, Plan, Sequential};
use tokenmixer_core::init::InitScales;

fn features() -> Vec<tokenmixer_core::tokenize::FeatureSpec> {
    SyntheticSpec { groups: 3, features_per_group: 2, ..SyntheticSpec::default() }.features()
}

fn toy(layers: usize) -> ModelConfig {
    ModelConfig { dim: 8, heads: 4, layers, init: InitScales::BASE, ..ModelConfig::default() }
}

#[test]
fn matches_serial_with_expected_exchange_counts() {
    let f = features();
    for layers in 1..=3 {
        let (model, params) = Model::build::<f64>(&f, &toy(layers)).unwrap();
        let ids = random_ids(&f, 8, layers as u64);
        let serial = run_serial(&model, &params, &ids, 8).unwrap();
        for devices in [1, 2, 4] {
            let opt = run_parallel(&model, &params, &ids, 8, devices, Plan::Optimized, &Sequential).unwrap();
            assert!(max_deviation(&opt, &serial).unwrap() < 1e-10);
            assert_eq!(opt.log.len(), 2 * layers + 1);
            let naive = run_parallel(&model, &params, &ids, 8, devices, Plan::Naive, &Sequential).unwrap();
            assert!(max_deviation(&naive, &serial).unwrap() < 1e-10);
            assert_eq!(naive.log.len(), 4 * layers);
        }
    }
}

#[test]
fn strategies_norms_and_moe() {
    let f = features();
    let variants = [
        ModelConfig { strategy: MixStrategy::Diagonal, ..toy(3) },
        ModelConfig { strategy: MixStrategy::Random, mix_seed: 5, ..toy(3) },
        ModelConfig { norm: tokenmixer_core::norm::NormPlacement::Sandwich, ..toy(2) },
        ModelConfig { moe: Some(MoeConfig::default()), ..toy(2) },
        ModelConfig { shared_weights: true, ..toy(2) },
    ];
    for cfg in variants {
        let (model, params) = Model::build::<f64>(&f, &cfg).unwrap();
        let ids = random_ids(&f, 8, 11);
        let serial = run_serial(&model, &params, &ids, 8).unwrap();
        for devices in [2, 4] {
            let out = run_parallel(&model, &params, &ids, 8, devices, Plan::Optimized, &Sequential).unwrap();
            assert!(max_deviation(&out, &serial).unwrap() < 1e-10, "{cfg:?}");
        }
    }
}

#[test]
fn half_token_mixing_is_rejected() {
    let f = features();
    let cfg = ModelConfig { strategy: MixStrategy::HalfTokens, ..toy(1) };
    let (model, params) = Model::build::<f64>(&f, &cfg).unwrap();
    let ids = random_ids(&f, 4, 1);
    assert!(run_parallel(&model, &params, &ids, 4, 2, Plan::Optimized, &Sequential).is_err());
}
