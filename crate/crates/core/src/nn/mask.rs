//! Span masking of encoder frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Masked encoder frames. `masked` is the sorted union of the spans
/// `[start, start + span_length)` clipped to the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub num_frames: usize,
    pub masked: Vec<usize>,
    pub span_starts: Vec<usize>,
    pub span_length: usize,
    pub start_prob: f64,
}

impl MaskSpec {
    pub fn none(num_frames: usize) -> Self {
        MaskSpec {
            num_frames,
            masked: Vec::new(),
            span_starts: Vec::new(),
            span_length: 1,
            start_prob: 0.0,
        }
    }

    /// Builds a mask from explicit span starts.
    pub fn from_starts(num_frames: usize, span_starts: Vec<usize>, span_length: usize) -> Self {
        let mut flags = vec![false; num_frames];
        for &s in &span_starts {
            for f in flags.iter_mut().skip(s).take(span_length) {
                *f = true;
            }
        }
        MaskSpec {
            num_frames,
            masked: flags
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
            span_starts,
            span_length,
            start_prob: f64::NAN,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_frames];
        for &i in &self.masked {
            flags[i] = true;
        }
        flags
    }
}

/// Each frame independently starts a span with probability `start_prob`.
pub fn sample_mask(num_frames: usize, start_prob: f64, span_length: usize, seed: u64) -> MaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mask_with(num_frames, start_prob, span_length, &mut rng)
}

pub fn sample_mask_with<R: Rng>(
    num_frames: usize,
    start_prob: f64,
    span_length: usize,
    rng: &mut R,
) -> MaskSpec {
    assert!((0.0..=1.0).contains(&start_prob), "start_prob must be in [0, 1]");
    assert!(span_length >= 1, "span_length must be >= 1");
    let starts: Vec<usize> = (0..num_frames)
        .filter(|_| rng.gen::<f64>() < start_prob)
        .collect();
    let mut mask = MaskSpec::from_starts(num_frames, starts, span_length);
    mask.start_prob = start_prob;
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probability_masks_nothing() {
        let m = sample_mask(100, 0.0, 10, 4);
        assert!(m.is_empty());
        assert!(m.span_starts.is_empty());
    }

    #[test]
    fn saturating_probability_masks_everything() {
        let m = sample_mask(37, 1.0, 1, 4);
        assert_eq!(m.masked, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn spans_clip_at_end() {
        let m = MaskSpec::from_starts(10, vec![2, 8], 4);
        assert_eq!(m.masked, vec![2, 3, 4, 5, 8, 9]);
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(sample_mask(500, 0.08, 10, 9), sample_mask(500, 0.08, 10, 9));
    }
}
