mod support;

use oobnet_core::model::ModelConfig;
use support::gradcheck;

const SEEDS: u64 = 24;

#[test]
fn every_op_matches_central_differences() {
    for (name, check) in gradcheck::OPS {
        for seed in 0..SEEDS {
            let err = check(seed);
            assert!(err <= 1e-4, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn bce_gradient_matches_central_differences() {
    for seed in 0..SEEDS {
        let err = gradcheck::bce(seed);
        assert!(err <= 1e-6, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn tiny_model_gradients_match_everywhere() {
    for seed in 0..3 {
        let err = gradcheck::model(&ModelConfig::tiny(), 3, seed, None);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn desk_model_gradients_match_on_sampled_coordinates() {
    let err = gradcheck::model(&ModelConfig::desk(), 2, 11, Some(6));
    assert!(err <= 1e-4, "relative error {err:e}");
}
