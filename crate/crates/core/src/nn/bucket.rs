//! Bucketed relative positions for the attention bias table.
//!
//! Half of the buckets cover non-positive offsets and half cover positive
//! ones. Within each half the first `half / 2` buckets are exact offsets,
//! the rest are spaced logarithmically up to `max_distance`, and every
//! offset at or beyond `max_distance` shares the half's last bucket.

/// Maps a key-minus-query offset to its bias bucket.
pub fn relative_bucket(offset: i64, num_buckets: usize, max_distance: usize) -> usize {
    debug_assert!(num_buckets >= 2);
    let half = num_buckets / 2;
    let base = if offset > 0 { half } else { 0 };
    let n = offset.unsigned_abs() as usize;
    let last = half - 1;
    let max_exact = (half / 2).max(1);
    if n < max_exact {
        return base + n.min(last);
    }
    if n >= max_distance || max_distance <= max_exact {
        return base + last;
    }
    let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let log_bucket = max_exact + (ratio * (half - max_exact) as f64) as usize;
    base + log_bucket.min(last)
}

/// Bucket index for every offset in `-(len-1)..=(len-1)`, indexed by
/// `offset + len - 1`.
pub fn bucket_table(len: usize, num_buckets: usize, max_distance: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let span = len as i64 - 1;
    (-span..=span)
        .map(|o| relative_bucket(o, num_buckets, max_distance))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_offset_is_bucket_zero() {
        assert_eq!(relative_bucket(0, 32, 128), 0);
        assert_eq!(relative_bucket(0, 320, 800), 0);
        assert_eq!(relative_bucket(0, 2, 1), 0);
    }

    #[test]
    fn saturates_at_max_distance() {
        assert_eq!(relative_bucket(800, 320, 800), relative_bucket(100_000, 320, 800));
        assert_eq!(relative_bucket(-800, 320, 800), relative_bucket(-100_000, 320, 800));
        assert_eq!(relative_bucket(800, 320, 800), 319);
        assert_eq!(relative_bucket(-800, 320, 800), 159);
    }

    #[test]
    fn signs_use_disjoint_halves() {
        for o in 1..300 {
            assert!(relative_bucket(o, 32, 128) >= 16);
            assert!(relative_bucket(-o, 32, 128) < 16);
        }
    }

    #[test]
    fn two_buckets() {
        assert_eq!(relative_bucket(-5, 2, 4), 0);
        assert_eq!(relative_bucket(5, 2, 4), 1);
        assert_eq!(relative_bucket(1, 2, 4), 1);
    }
}
