//! CTC recursions against exhaustive enumeration of frame-level paths.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgcb_core::align::{ctc_forced_align, ctc_forward_backward, ctc_greedy_decode, ctc_viterbi};

mod common;
use common::{all_paths, collapse, ctc_instances, path_score};

#[test]
fn loss_equals_path_enumeration() {
    for (i, inst) in ctc_instances(200, 1).iter().enumerate() {
        let (t, c) = inst.log_probs.dim();
        let valid: Vec<f64> = all_paths(t, c)
            .iter()
            .filter(|p| collapse(p) == inst.target)
            .map(|p| path_score(&inst.log_probs, p))
            .collect();
        let brute = -valid.iter().map(|s| s.exp()).sum::<f64>().ln();
        let out = ctc_forward_backward(&inst.log_probs.view(), &inst.target).unwrap();
        assert!(
            (out.loss - brute).abs() < 1e-10,
            "instance {i}: {} vs {brute}",
            out.loss
        );
    }
}

#[test]
fn gradient_equals_path_occupancy() {
    // d(-log P)/d lp[t][c] = -(sum of probabilities of valid paths using c at t) / P.
    for inst in ctc_instances(200, 2) {
        let (t, c) = inst.log_probs.dim();
        let mut occ = Array2::<f64>::zeros((t, c));
        let mut total = 0.0;
        for p in all_paths(t, c).iter().filter(|p| collapse(p) == inst.target) {
            let prob = path_score(&inst.log_probs, p).exp();
            total += prob;
            for (f, &k) in p.iter().enumerate() {
                occ[[f, k as usize]] += prob;
            }
        }
        let out = ctc_forward_backward(&inst.log_probs.view(), &inst.target).unwrap();
        for (a, b) in out.grad.iter().zip(occ.iter()) {
            assert!((a + b / total).abs() < 1e-10);
        }
    }
}

#[test]
fn viterbi_equals_path_maximum() {
    for (i, inst) in ctc_instances(200, 3).iter().enumerate() {
        let (t, c) = inst.log_probs.dim();
        let best = all_paths(t, c)
            .iter()
            .filter(|p| collapse(p) == inst.target)
            .map(|p| path_score(&inst.log_probs, p))
            .fold(f64::NEG_INFINITY, f64::max);
        let (path, score) = ctc_viterbi(&inst.log_probs.view(), &inst.target).unwrap();
        assert!((score - best).abs() < 1e-10, "instance {i}: {score} vs {best}");
        assert!((path_score(&inst.log_probs, &path) - best).abs() < 1e-10);
        assert_eq!(collapse(&path), inst.target);
    }
}

#[test]
fn peaked_alignment_is_the_unique_optimum() {
    let mut lp = Array2::from_elem((3, 3), 0.01f64.ln());
    lp[[0, 1]] = 0.98f64.ln();
    lp[[1, 2]] = 0.98f64.ln();
    lp[[2, 2]] = 0.98f64.ln();
    let scores: Vec<(Vec<u16>, f64)> = all_paths(3, 3)
        .into_iter()
        .filter(|p| collapse(p) == [1, 2])
        .map(|p| {
            let s = path_score(&lp, &p);
            (p, s)
        })
        .collect();
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<_> = scores.iter().filter(|s| s.1 == best).collect();
    assert_eq!(winners.len(), 1);
    assert_eq!(winners[0].0, vec![1, 2, 2]);
    assert_eq!(ctc_forced_align(&lp.view(), &[1, 2]).unwrap(), vec![1, 2, 2]);
}

#[test]
fn greedy_matches_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let t = rng.gen_range(1..30);
        let c = rng.gen_range(2..6);
        // Coarse values so that ties occur.
        let lp = Array2::from_shape_fn((t, c), |_| rng.gen_range(0..4) as f64);
        let mut expected = Vec::new();
        let mut prev: Option<u16> = None;
        for row in lp.rows() {
            let mut arg = 0;
            for k in 1..c {
                if row[k] > row[arg] {
                    arg = k;
                }
            }
            let arg = arg as u16;
            if arg != 0 && prev != Some(arg) {
                expected.push(arg);
            }
            prev = Some(arg);
        }
        assert_eq!(ctc_greedy_decode(&lp.view()), expected);
    }
}
