//! Bucketing, masking and schedules against independent references.

use sgcb_core::nn::{relative_bucket, sample_mask, Schedule};

mod common;
use common::reference_bucket_32_128;

#[test]
fn bucket_table_matches_reference() {
    for offset in -200..=200i64 {
        assert_eq!(
            relative_bucket(offset, 32, 128),
            reference_bucket_32_128(offset),
            "offset {offset}"
        );
    }
}

#[test]
fn buckets_saturate_and_are_monotone() {
    for &(buckets, max_distance) in &[(32usize, 128usize), (320, 800), (8, 6), (2, 1), (17, 40)] {
        let half = buckets / 2;
        let far = (10 * max_distance) as i64;
        let mut prev = (0, 0);
        for n in 0..=far {
            let pos = relative_bucket(n, buckets, max_distance);
            let neg = relative_bucket(-n, buckets, max_distance);
            if n >= max_distance as i64 {
                assert_eq!(pos, relative_bucket(max_distance as i64, buckets, max_distance));
                assert_eq!(neg, half - 1);
            }
            if n > 0 {
                assert!(pos >= half && pos < 2 * half);
                assert!(pos >= prev.0 && neg >= prev.1);
            }
            assert!(neg < half);
            prev = (pos, neg);
        }
    }
}

/// SplitMix64, used so the oracle shares no code or stream with the sampler.
struct SplitMix(u64);

impl SplitMix {
    fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn mask_fraction_matches_independent_simulation() {
    let (t, p, l, runs) = (1000usize, 0.08, 10usize, 10_000u64);
    let sampled: Vec<f64> = (0..runs)
        .map(|seed| sample_mask(t, p, l, seed).masked.len() as f64 / t as f64)
        .collect();

    // A frame is masked iff some frame in the l-window ending at it started a span.
    let mut rng = SplitMix(0xfeed);
    let simulated: Vec<f64> = (0..runs)
        .map(|_| {
            let starts: Vec<bool> = (0..t).map(|_| rng.next_f64() < p).collect();
            let masked = (0..t)
                .filter(|&i| starts[i.saturating_sub(l - 1)..=i].iter().any(|&s| s))
                .count();
            masked as f64 / t as f64
        })
        .collect();

    let (a, se_a) = mean_and_se(&sampled);
    let (b, se_b) = mean_and_se(&simulated);
    let se = (se_a * se_a + se_b * se_b).sqrt();
    assert!((a - b).abs() < 3.0 * se, "sampler {a} vs simulation {b} (se {se})");
}

#[test]
fn schedule_matches_closed_form_table() {
    let peak = 5e-4;
    let linear = Schedule::linear(1000, 0.1, peak);
    let tri = Schedule::tri_stage(1000, 0.1, 0.4, peak);
    for step in 0..1000usize {
        let s = step as f64;
        let want_linear = if step < 100 { peak * s / 100.0 } else { peak * (1000.0 - s) / 900.0 };
        let want_tri = if step < 100 {
            peak * s / 100.0
        } else if step < 500 {
            peak
        } else {
            peak * (1000.0 - s) / 500.0
        };
        assert!((linear.lr(step) - want_linear).abs() <= 1e-15 * peak, "linear step {step}");
        assert!((tri.lr(step) - want_tri).abs() <= 1e-15 * peak, "tri-stage step {step}");
    }
    assert_eq!(linear.lr(100), peak);
    assert!(linear.lr(99) < peak);
}
