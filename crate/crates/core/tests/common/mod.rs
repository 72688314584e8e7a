//! Reference implementations shared by the oracle tests and the acceptance
//! suite.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgcb_core::nn::{
    finetune_loss, gradient_check, log_softmax_rows, masked_prediction_loss, EncoderConfig, EncoderModel,
    ForwardOptions, HeadKind, MaskSpec, Parameters,
};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Removes blanks (0) after merging repeats.
pub fn collapse(path: &[u16]) -> Vec<u16> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Every class sequence of length `t` over `c` classes.
pub fn all_paths(t: usize, c: usize) -> Vec<Vec<u16>> {
    (0..c.pow(t as u32))
        .map(|mut code| {
            (0..t)
                .map(|_| {
                    let d = code % c;
                    code /= c;
                    d as u16
                })
                .collect()
        })
        .collect()
}

pub fn path_score(lp: &Array2<f64>, path: &[u16]) -> f64 {
    path.iter().enumerate().map(|(t, &c)| lp[[t, c as usize]]).sum()
}

/// Scores of all paths that collapse to `target`.
pub fn valid_path_scores(lp: &Array2<f64>, target: &[u16]) -> Vec<(Vec<u16>, f64)> {
    let (t, c) = lp.dim();
    all_paths(t, c)
        .into_iter()
        .filter(|p| collapse(p) == target)
        .map(|p| {
            let s = path_score(lp, &p);
            (p, s)
        })
        .collect()
}

pub struct CtcInstance {
    pub log_probs: Array2<f64>,
    pub target: Vec<u16>,
}

/// Feasible random instances with T' <= 6, L <= 3 and 2..=4 classes.
pub fn ctc_instances(n: usize, seed: u64) -> Vec<CtcInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let t = rng.gen_range(1..=6);
        let c = rng.gen_range(2..=4);
        let l = rng.gen_range(0..=3);
        let target: Vec<u16> = (0..l).map(|_| rng.gen_range(1..c as u16)).collect();
        let need = target.len() + target.windows(2).filter(|w| w[0] == w[1]).count();
        if need > t {
            continue;
        }
        let logits = Array2::from_shape_fn((t, c), |_| rng.gen_range(-3.0..3.0));
        out.push(CtcInstance {
            log_probs: log_softmax_rows(&logits.view()),
            target,
        });
    }
    out
}

/// Reference for 32 buckets and max distance 128, in integer arithmetic.
/// Each sign gets 16 buckets, 8 of them exact. Past that the log bucket of
/// `n` is `8 + floor(8 * log_16(n / 8))`, i.e. the largest `k` with
/// `8 * 2^(k/2) <= n`, i.e. `64 * 2^k <= n^2`.
pub fn reference_bucket_32_128(offset: i64) -> usize {
    let base = if offset > 0 { 16 } else { 0 };
    let n = offset.unsigned_abs();
    if n < 8 {
        return base + n as usize;
    }
    if n >= 128 {
        return base + 15;
    }
    let mut k = 0;
    while 64u64 << (k + 1) <= n * n {
        k += 1;
    }
    base + (8 + k).min(15)
}

pub fn tiny_encoder(layers: usize, vocab: usize) -> EncoderConfig {
    EncoderConfig {
        input_dim: 3,
        num_layers: layers,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        downsample_factor: 2,
        num_buckets: 8,
        max_distance: 6,
        vocab_size: vocab,
        dropout: 0.0,
    }
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5))
}

/// Perturbs every tensor away from its init so LayerNorm gains, zero biases
/// and the zero bias table do not hide errors.
pub fn jitter(model: &mut EncoderModel, rng: &mut ChaCha8Rng) {
    model.params.for_each_mut(|_, v| {
        for x in v.iter_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    });
}

fn with_params(model: &EncoderModel, p: &Parameters) -> EncoderModel {
    EncoderModel {
        params: p.clone(),
        ..model.clone()
    }
}

/// Max relative error of all parameter gradients of a jittered encoder
/// under the masked-prediction loss.
pub fn encoder_masked_trial(layers: usize, trial: u64, rng: &mut ChaCha8Rng) -> f64 {
    let mut model = EncoderModel::new(tiny_encoder(layers, 5), HeadKind::Targets, trial).unwrap();
    jitter(&mut model, rng);
    let x = random_matrix(14, 3, rng);
    let targets: Vec<u16> = (0..7).map(|_| rng.gen_range(0..5)).collect();
    let mask = MaskSpec::from_starts(7, vec![rng.gen_range(0..7)], 2);
    let f = |p: &Parameters| {
        let m = with_params(&model, p);
        let opts = ForwardOptions {
            mask: Some(&mask),
            dropout_seed: None,
        };
        let (out, cache) = m.forward(&x, &opts).unwrap();
        let (loss, g) = masked_prediction_loss(&out.logits, &targets, &mask).unwrap();
        (loss, m.backward(&cache, &g, true))
    };
    gradient_check(f, &model.params, GRAD_EPS, usize::MAX, trial).max_rel_error
}

/// Same under the CTC fine-tuning loss.
pub fn encoder_ctc_trial(layers: usize, trial: u64, rng: &mut ChaCha8Rng) -> f64 {
    let mut model = EncoderModel::new(tiny_encoder(layers, 4), HeadKind::Ctc, 100 + trial).unwrap();
    jitter(&mut model, rng);
    let x = random_matrix(16, 3, rng);
    let transcript: Vec<u16> = (0..3).map(|_| rng.gen_range(1..4)).collect();
    let f = |p: &Parameters| {
        let m = with_params(&model, p);
        let (out, cache) = m.forward(&x, &ForwardOptions::default()).unwrap();
        let (loss, g) = finetune_loss(&out.logits, &transcript).unwrap();
        (loss, m.backward(&cache, &g, true))
    };
    gradient_check(f, &model.params, GRAD_EPS, usize::MAX, trial).max_rel_error
}
