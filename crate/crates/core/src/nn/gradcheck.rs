//! Central finite-difference checks of analytic gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::Parameters;

/// Anything that can be viewed as a flat vector of f64 coordinates.
pub trait FlatParams: Clone {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, value: f64);
}

impl FlatParams for Vec<f64> {
    fn len(&self) -> usize {
        <[f64]>::len(self)
    }
    fn get(&self, i: usize) -> f64 {
        self[i]
    }
    fn set(&mut self, i: usize, value: f64) {
        self[i] = value;
    }
}

impl FlatParams for Array2<f64> {
    fn len(&self) -> usize {
        ndarray::ArrayBase::len(self)
    }
    fn get(&self, i: usize) -> f64 {
        self.as_slice().expect("standard layout")[i]
    }
    fn set(&mut self, i: usize, value: f64) {
        self.as_slice_mut().expect("standard layout")[i] = value;
    }
}

impl FlatParams for Parameters {
    fn len(&self) -> usize {
        self.num_values()
    }
    fn get(&self, i: usize) -> f64 {
        let mut offset = 0;
        let mut out = f64::NAN;
        self.for_each(|_, _, v| {
            if (offset..offset + v.len()).contains(&i) {
                out = v[i - offset];
            }
            offset += v.len();
        });
        out
    }
    fn set(&mut self, i: usize, value: f64) {
        let mut offset = 0;
        self.for_each_mut(|_, v| {
            if (offset..offset + v.len()).contains(&i) {
                v[i - offset] = value;
            }
            offset += v.len();
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// coordinates whose true gradient is 0 (the attention key bias, for one)
/// from being judged on round-off: central differences of a loss of size
/// ~10 at eps 1e-5 carry noise of order 1e-10.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// Compares the analytic gradient of `loss_fn` at `params` to central
/// differences on `coords` randomly chosen coordinates (all of them when
/// `coords >= len`).
pub fn gradient_check<P, F>(mut loss_fn: F, params: &P, eps: f64, coords: usize, seed: u64) -> GradCheckReport
where
    P: FlatParams,
    F: FnMut(&P) -> (f64, P),
{
    let (_, analytic) = loss_fn(params);
    let n = params.len();
    let indices: Vec<usize> = if coords >= n {
        (0..n).collect()
    } else {
        let mut v = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, coords).into_vec();
        v.sort_unstable();
        v
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: indices.len(),
    };
    let mut probe = params.clone();
    for &i in &indices {
        let x = params.get(i);
        probe.set(i, x + eps);
        let (up, _) = loss_fn(&probe);
        probe.set(i, x - eps);
        let (down, _) = loss_fn(&probe);
        probe.set(i, x);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
        }
    }
    report
}
