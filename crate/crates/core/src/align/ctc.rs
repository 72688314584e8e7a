//! CTC over the blank-augmented label trellis, in the log domain.
//!
//! Blank is class 0; labels are `1..C`. The expanded target interleaves
//! blanks: `[_, l1, _, l2, _, ..., lL, _]` with `2L + 1` states.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtcError {
    #[error("target needs at least {required} frames, got {frames}")]
    InfeasibleTarget { required: usize, frames: usize },
    #[error("label {label} outside 1..{classes}")]
    InvalidLabel { label: u16, classes: usize },
}

pub const BLANK: u16 = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum frame count for `target`: one per label plus a separating blank
/// between each pair of equal neighbours.
pub fn required_frames(target: &[u16]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn expand_target(target: &[u16]) -> Vec<u16> {
    let mut out = Vec::with_capacity(2 * target.len() + 1);
    out.push(BLANK);
    for &l in target {
        out.push(l);
        out.push(BLANK);
    }
    out
}

fn check(log_probs: &ArrayView2<f64>, target: &[u16]) -> Result<(), CtcError> {
    let classes = log_probs.ncols();
    if let Some(&label) = target
        .iter()
        .find(|&&l| l == BLANK || l as usize >= classes)
    {
        return Err(CtcError::InvalidLabel { label, classes });
    }
    let required = required_frames(target);
    if log_probs.nrows() < required {
        return Err(CtcError::InfeasibleTarget {
            required,
            frames: log_probs.nrows(),
        });
    }
    Ok(())
}

/// Whether state `s` may be entered directly from `s - 2` (skipping a blank).
fn can_skip(ext: &[u16], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Log-domain forward and backward variables. Both include the emission at
/// their own frame, so `alpha[t][s] + beta[t][s] - emit(t, s)` is the log
/// probability of all paths through state `s` at frame `t`.
#[derive(Debug, Clone)]
pub struct CtcTrellis {
    pub expanded_target: Vec<u16>,
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
    pub log_likelihood: f64,
}

pub fn ctc_trellis(log_probs: &ArrayView2<f64>, target: &[u16]) -> Result<CtcTrellis, CtcError> {
    check(log_probs, target)?;
    let ext = expand_target(target);
    let (t_len, n_states) = (log_probs.nrows(), ext.len());
    let emit = |t: usize, s: usize| log_probs[[t, ext[s] as usize]];

    let mut alpha = Array2::from_elem((t_len, n_states), f64::NEG_INFINITY);
    alpha[[0, 0]] = emit(0, 0);
    if n_states > 1 {
        alpha[[0, 1]] = emit(0, 1);
    }
    for t in 1..t_len {
        for s in 0..n_states {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(&ext, s) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            if acc != f64::NEG_INFINITY {
                alpha[[t, s]] = acc + emit(t, s);
            }
        }
    }

    let mut beta = Array2::from_elem((t_len, n_states), f64::NEG_INFINITY);
    let last = t_len - 1;
    beta[[last, n_states - 1]] = emit(last, n_states - 1);
    if n_states > 1 {
        beta[[last, n_states - 2]] = emit(last, n_states - 2);
    }
    for t in (0..last).rev() {
        for s in 0..n_states {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < n_states {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < n_states && can_skip(&ext, s + 2) {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            if acc != f64::NEG_INFINITY {
                beta[[t, s]] = acc + emit(t, s);
            }
        }
    }

    let mut ll = alpha[[last, n_states - 1]];
    if n_states > 1 {
        ll = log_add(ll, alpha[[last, n_states - 2]]);
    }
    Ok(CtcTrellis {
        expanded_target: ext,
        alpha,
        beta,
        log_likelihood: ll,
    })
}

#[derive(Debug, Clone)]
pub struct CtcOutput {
    /// `-log P(target | log_probs)`.
    pub loss: f64,
    /// Gradient of the loss with respect to each log-probability entry.
    pub grad: Array2<f64>,
}

/// CTC negative log-likelihood and its gradient with respect to `log_probs`
/// (T×C, rows normalized in the log domain).
pub fn ctc_forward_backward(log_probs: &ArrayView2<f64>, target: &[u16]) -> Result<CtcOutput, CtcError> {
    let trellis = ctc_trellis(log_probs, target)?;
    let ll = trellis.log_likelihood;
    let mut grad = Array2::zeros(log_probs.raw_dim());
    if ll == f64::NEG_INFINITY {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad,
        });
    }
    for t in 0..log_probs.nrows() {
        for (s, &label) in trellis.expanded_target.iter().enumerate() {
            let a = trellis.alpha[[t, s]];
            let b = trellis.beta[[t, s]];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            let occupancy = (a + b - log_probs[[t, label as usize]] - ll).exp();
            grad[[t, label as usize]] -= occupancy;
        }
    }
    Ok(CtcOutput {
        loss: (-ll).max(0.0),
        grad,
    })
}

fn argmax_lowest(row: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in row.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Per-frame argmax (ties to the lowest class), merge repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &ArrayView2<f64>) -> Vec<u16> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.rows() {
        let best = argmax_lowest(row.iter().copied()) as u16;
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Best single path through the trellis constrained to `target`, as one
/// class per frame (blank or label). On exact score ties the path that stays
/// in its current state is preferred over one that advances.
pub fn ctc_forced_align(log_probs: &ArrayView2<f64>, target: &[u16]) -> Result<Vec<u16>, CtcError> {
    Ok(ctc_viterbi(log_probs, target)?.0)
}

/// Forced alignment together with its log score.
pub fn ctc_viterbi(log_probs: &ArrayView2<f64>, target: &[u16]) -> Result<(Vec<u16>, f64), CtcError> {
    check(log_probs, target)?;
    let ext = expand_target(target);
    let (t_len, n_states) = (log_probs.nrows(), ext.len());
    let emit = |t: usize, s: usize| log_probs[[t, ext[s] as usize]];

    let mut score = Array2::from_elem((t_len, n_states), f64::NEG_INFINITY);
    let mut back = Array2::<u8>::zeros((t_len, n_states));
    score[[0, 0]] = emit(0, 0);
    if n_states > 1 {
        score[[0, 1]] = emit(0, 1);
    }
    for t in 1..t_len {
        for s in 0..n_states {
            // Candidates in preference order: stay, advance by one, skip.
            let mut best = score[[t - 1, s]];
            let mut step = 0u8;
            if s >= 1 && score[[t - 1, s - 1]] > best {
                best = score[[t - 1, s - 1]];
                step = 1;
            }
            if can_skip(&ext, s) && score[[t - 1, s - 2]] > best {
                best = score[[t - 1, s - 2]];
                step = 2;
            }
            if best != f64::NEG_INFINITY {
                score[[t, s]] = best + emit(t, s);
                back[[t, s]] = step;
            }
        }
    }

    let last = t_len - 1;
    // Ending on the final label rather than the trailing blank means the
    // path did not advance, so it wins ties.
    let mut state = n_states - 1;
    if n_states > 1 && score[[last, n_states - 2]] >= score[[last, n_states - 1]] {
        state = n_states - 2;
    }
    let total = score[[last, state]];
    let mut path = vec![BLANK; t_len];
    for t in (0..t_len).rev() {
        path[t] = ext[state];
        if t > 0 {
            state -= back[[t, state]] as usize;
        }
    }
    Ok((path, total))
}
