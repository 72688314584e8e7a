use ndarray::{Array2, ArrayView2, Axis};

use super::mask::MaskSpec;
use super::NnError;
use crate::align::ctc_forward_backward;

pub fn log_softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    log_softmax_rows(logits).mapv(f64::exp)
}

/// Mean cross-entropy over masked frames only. The gradient rows of unmasked
/// frames are exactly zero.
pub fn masked_prediction_loss(
    logits: &Array2<f64>,
    targets: &[u16],
    mask: &MaskSpec,
) -> Result<(f64, Array2<f64>), NnError> {
    masked_prediction_loss_weighted(logits, targets, mask, 0.0)
}

/// `mean_CE(masked) + unmasked_weight * mean_CE(unmasked)`.
pub fn masked_prediction_loss_weighted(
    logits: &Array2<f64>,
    targets: &[u16],
    mask: &MaskSpec,
    unmasked_weight: f64,
) -> Result<(f64, Array2<f64>), NnError> {
    let (t, v) = logits.dim();
    if targets.len() != t {
        return Err(NnError::ShapeMismatch(format!(
            "{} targets for {t} logit rows",
            targets.len()
        )));
    }
    if mask.is_empty() {
        return Err(NnError::EmptyMask);
    }
    if let Some(&bad) = targets.iter().find(|&&l| l as usize >= v) {
        return Err(NnError::LabelOutOfRange { label: bad, vocab: v });
    }
    let flags = mask.flags();
    if flags.len() != t {
        return Err(NnError::ShapeMismatch(format!(
            "mask covers {} frames, logits have {t}",
            flags.len()
        )));
    }
    let n_masked = mask.masked.len() as f64;
    let n_unmasked = (t - mask.masked.len()) as f64;

    let log_probs = log_softmax_rows(&logits.view());
    let mut grad = Array2::zeros((t, v));
    let mut loss = 0.0;
    for (i, (lp, mut g)) in log_probs
        .axis_iter(Axis(0))
        .zip(grad.axis_iter_mut(Axis(0)))
        .enumerate()
    {
        let weight = if flags[i] {
            1.0 / n_masked
        } else if unmasked_weight > 0.0 && n_unmasked > 0.0 {
            unmasked_weight / n_unmasked
        } else {
            continue;
        };
        let target = targets[i] as usize;
        loss -= weight * lp[target];
        for (gk, &l) in g.iter_mut().zip(lp.iter()) {
            *gk = weight * l.exp();
        }
        g[target] -= weight;
    }
    Ok((loss, grad))
}

/// CTC loss of a phoneme transcript (labels `1..V-1`, blank 0) against the
/// softmax of `logits`, with the gradient taken with respect to the logits.
pub fn finetune_loss(logits: &Array2<f64>, transcript: &[u16]) -> Result<(f64, Array2<f64>), NnError> {
    let log_probs = log_softmax_rows(&logits.view());
    let out = ctc_forward_backward(&log_probs.view(), transcript)?;
    // Chain through log-softmax: dz = g - softmax * sum(g).
    let mut grad = out.grad;
    for (mut g, lp) in grad.rows_mut().into_iter().zip(log_probs.rows()) {
        let total: f64 = g.sum();
        for (gk, &l) in g.iter_mut().zip(lp.iter()) {
            *gk -= l.exp() * total;
        }
    }
    Ok((out.loss, grad))
}
