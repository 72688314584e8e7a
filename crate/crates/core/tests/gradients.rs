//! Finite-difference checks of every analytic gradient in the encoder.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgcb_core::nn::{finetune_loss, gradient_check, masked_prediction_loss_weighted, MaskSpec};

mod common;
use common::{encoder_ctc_trial, encoder_masked_trial, random_matrix, GRAD_EPS as EPS, GRAD_TOL as TOL};

#[test]
fn masked_loss_gradient_wrt_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..50 {
        let logits = random_matrix(8, 5, &mut rng);
        let targets: Vec<u16> = (0..8).map(|_| rng.gen_range(0..5)).collect();
        let mask = MaskSpec::from_starts(8, vec![rng.gen_range(0..8), rng.gen_range(0..8)], 2);
        let weight = if trial % 2 == 0 { 0.0 } else { 0.3 };
        let f = |z: &Array2<f64>| masked_prediction_loss_weighted(z, &targets, &mask, weight).unwrap();
        let r = gradient_check(f, &logits, EPS, usize::MAX, trial);
        assert!(r.max_rel_error < TOL, "trial {trial}: {r:?}");
    }
}

#[test]
fn ctc_loss_gradient_wrt_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..50 {
        let t = rng.gen_range(3..9);
        let logits = random_matrix(t, 4, &mut rng);
        let len = rng.gen_range(0..=(t / 2).min(3));
        let transcript: Vec<u16> = (0..len).map(|_| rng.gen_range(1..4)).collect();
        let f = |z: &Array2<f64>| finetune_loss(z, &transcript).unwrap();
        let r = gradient_check(f, &logits, EPS, usize::MAX, trial);
        assert!(r.max_rel_error < TOL, "trial {trial}: {r:?}");
    }
}

#[test]
fn encoder_masked_prediction_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..25u64 {
        let err = encoder_masked_trial(1 + trial as usize % 2, trial, &mut rng);
        assert!(err < TOL, "trial {trial}: {err}");
    }
}

#[test]
fn encoder_ctc_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..25u64 {
        let err = encoder_ctc_trial(2, trial, &mut rng);
        assert!(err < TOL, "trial {trial}: {err}");
    }
}
