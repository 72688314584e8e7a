use ndarray::{s, Array2};
use rayon::prelude::*;

use super::QuantizeError;
use crate::corpus::Utterance;
use crate::nn::EncoderModel;

/// Hidden states of `layer` (0 = frontend output) for each utterance, from an
/// unmasked forward pass.
pub fn extract_layer_features(
    model: &EncoderModel,
    utterances: &[Utterance],
    layer: usize,
) -> Result<Vec<Array2<f64>>, QuantizeError> {
    let num_layers = model.config.num_layers;
    if layer > num_layers {
        return Err(QuantizeError::LayerOutOfRange { layer, num_layers });
    }
    utterances
        .par_iter()
        .map(|u| {
            let mut out = model.infer(&u.features)?;
            Ok(out.hidden.swap_remove(layer))
        })
        .collect()
}

/// Concatenates each run of `factor` consecutive frames into one row, so raw
/// features line up with the encoder frame rate. Trailing frames that do not
/// fill a window are dropped.
pub fn stack_frames(features: &Array2<f32>, factor: usize) -> Array2<f64> {
    let (t, d) = features.dim();
    let rows = t / factor;
    let mut out = Array2::zeros((rows, d * factor));
    for r in 0..rows {
        for k in 0..factor {
            out.slice_mut(s![r, k * d..(k + 1) * d])
                .assign(&features.row(r * factor + k).mapv(f64::from));
        }
    }
    out
}

/// Stacks per-utterance matrices into one, keeping every `every`-th row of
/// the concatenation.
pub fn flatten_frames(blocks: &[Array2<f64>], every: usize) -> Array2<f64> {
    let every = every.max(1);
    let dim = blocks.iter().map(|b| b.ncols()).next().unwrap_or(0);
    let rows: Vec<_> = blocks
        .iter()
        .flat_map(|b| b.rows().into_iter())
        .step_by(every)
        .collect();
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{EncoderConfig, HeadKind};
    use ndarray::array;

    #[test]
    fn stacking_and_flattening() {
        let f = array![[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(stack_frames(&f, 2), array![[1.0, 2.0, 3.0, 4.0]]);
        let a = array![[1.0], [2.0], [3.0]];
        let b = array![[4.0], [5.0]];
        assert_eq!(flatten_frames(&[a, b], 2), array![[1.0], [3.0], [5.0]]);
    }

    #[test]
    fn layer_zero_is_frontend_and_range_checked() {
        let model = EncoderModel::new(EncoderConfig::default(), HeadKind::Targets, 3).unwrap();
        let feats = Array2::from_shape_fn((20, 8), |(i, j)| ((i * 7 + j) % 5) as f32 * 0.3);
        let utt = Utterance {
            id: "u".into(),
            features: feats.clone(),
            transcript: None,
            truth_alignment: None,
        };
        let got = extract_layer_features(&model, std::slice::from_ref(&utt), 0).unwrap();
        let want = model.frontend_output(&feats.mapv(f64::from)).unwrap();
        assert_eq!(got[0], want);
        let again = extract_layer_features(&model, std::slice::from_ref(&utt), 2).unwrap();
        assert_eq!(again, extract_layer_features(&model, &[utt.clone()], 2).unwrap());
        assert!(matches!(
            extract_layer_features(&model, &[utt], 3),
            Err(QuantizeError::LayerOutOfRange { layer: 3, num_layers: 2 })
        ));
    }
}
