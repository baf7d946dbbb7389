mod common;

use common::*;
use eer_ner::objectives::EerConfig;
use rand::Rng;

#[test]
fn full_pipeline_gradients_match_central_differences() {
    let mut r = rng(21);
    for case in 0..24 {
        let classes = r.gen_range(1..=2);
        let sentences = r.gen_range(1..=4);
        let dataset = random_dataset(&mut r, sentences, classes, 5);
        let params = random_model(&mut r, &dataset);
        let config = band_around(batch_rho_hat(&params, &dataset), case);
        let err = max_relative_fd_error(&params, &dataset, &config, 1e-5, 1e-6);
        assert!(err < 1e-4, "case {case}: relative error {err:e} with {config:?}");
    }
}

#[test]
fn marginal_only_gradients_match_central_differences() {
    let mut r = rng(22);
    let off = EerConfig {
        rho: 0.15,
        gamma: 0.05,
        lambda_u: 0.0,
    };
    for case in 0..6 {
        let dataset = random_dataset(&mut r, 3, 2, 6);
        let params = random_model(&mut r, &dataset);
        let err = max_relative_fd_error(&params, &dataset, &off, 1e-5, 1e-6);
        assert!(err < 1e-4, "case {case}: relative error {err:e}");
    }
}

#[test]
fn gradient_vanishes_inside_the_band_without_observations() {
    let mut r = rng(23);
    let dataset = random_dataset(&mut r, 3, 1, 5);
    let dataset = dataset.map_observations(|_| Ok(eer_ner::corpus::ObservedTags::new())).unwrap();
    let params = random_model(&mut r, &dataset);
    let config = band_around(batch_rho_hat(&params, &dataset), 2);
    let (loss, grad) = batch_loss(&params, &dataset, &config);
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
}
