mod common;

use pmemn2n::model::{Component, ModelConfig, ModelParameters};

fn check(
    fx: &common::Fixture,
    params: &ModelParameters,
    config: &ModelConfig,
    inst: &pmemn2n::data::DialogInstance,
) {
    let (worst, at) = common::gradient_error(fx, params, config, inst);
    assert!(worst < 1e-4, "relative error {worst} at {at}");
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let fx = common::fixture();
    let config = ModelConfig {
        embedding_dim: 8,
        hops: 2,
        ..Default::default()
    };
    for seed in 0..3 {
        let params = fx.params(8, seed);
        let inst = fx.random_instance(seed + 10, 3, 4);
        check(&fx, &params, &config, &inst);
    }
}

#[test]
fn every_component_subset_has_correct_gradients() {
    let fx = common::fixture();
    let all = [Component::Profile, Component::Global, Component::Preference];
    for mask in 0..8u32 {
        let on: Vec<Component> = (0..3)
            .filter(|b| mask & (1 << b) != 0)
            .map(|b| all[b])
            .collect();
        let config = ModelConfig {
            embedding_dim: 6,
            hops: 3,
            ..Default::default()
        }
        .with_components(&on);
        let params = fx.params(6, 100 + mask as u64);
        let inst = fx.random_instance(200 + mask as u64, 4, 3);
        check(&fx, &params, &config, &inst);
    }
}

#[test]
fn empty_memories_have_correct_gradients() {
    let fx = common::fixture();
    let config = ModelConfig {
        embedding_dim: 5,
        hops: 2,
        ..Default::default()
    };
    let params = fx.params(5, 9);
    let inst = fx.random_instance(9, 0, 0);
    check(&fx, &params, &config, &inst);
}
