//! Step 3: frame-level targets for every utterance of S and U.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::config::{CodebookMethod, PipelineConfig};
use super::train::{greedy_transcripts, reference_transcript};
use super::{derive_seed, PipelineError};
use crate::align::{
    frame_targets_from_model, ground_truth_targets, Provenance, TargetEntry, TargetMode, TargetSet,
};
use crate::corpus::Utterance;
use crate::eval::{cluster_metrics, corpus_error_rate, frame_accuracy};
use crate::nn::{EncoderModel, HeadKind};
use crate::quantize::{
    extract_layer_features, flatten_frames, kmeans_assign, kmeans_fit, stack_frames, Codebook,
    CodebookSource, FeatureKind, KmeansConfig,
};

#[derive(Debug, Clone)]
pub struct TargetOutcome {
    pub targets: TargetSet,
    pub codebook: Option<Codebook>,
    /// Utterances whose transcript could not be aligned.
    pub skipped: Vec<String>,
    /// Greedy transcripts of the unlabeled utterances, when decoded.
    pub pseudo_transcripts: Option<BTreeMap<String, Vec<u16>>>,
}

fn kmeans_targets(
    blocks: Vec<Array2<f64>>,
    ids: &[&str],
    source: CodebookSource,
    provenance: Provenance,
    config: &PipelineConfig,
    seed: u64,
) -> Result<TargetOutcome, PipelineError> {
    let fit_rows = flatten_frames(&blocks, config.kmeans_subsample);
    let kcfg = KmeansConfig {
        k: config.kmeans_k,
        seed: derive_seed(seed, "kmeans"),
        max_iters: config.kmeans_max_iters,
        rel_tol: config.kmeans_rel_tol,
    };
    let codebook = kmeans_fit(&fit_rows.view(), &kcfg, source)?;
    let mut targets = TargetSet::new(codebook.k(), provenance);
    for (id, block) in ids.iter().zip(&blocks) {
        targets.entries.push(TargetEntry {
            id: id.to_string(),
            labels: kmeans_assign(&codebook, &block.view())?,
        });
    }
    Ok(TargetOutcome {
        targets,
        codebook: Some(codebook),
        skipped: Vec::new(),
        pseudo_transcripts: None,
    })
}

fn require_head(model: Option<&EncoderModel>, head: HeadKind, method: CodebookMethod) -> Result<&EncoderModel, PipelineError> {
    match model {
        Some(m) if m.head == head => Ok(m),
        Some(_) => Err(PipelineError::Config(format!(
            "{method} needs a model with a {} head",
            head.as_str()
        ))),
        None => Err(PipelineError::Config(format!("{method} needs a model"))),
    }
}

/// Targets over `labeled` followed by `unlabeled`. `model` is the supervised
/// CTC model for `ctc-kmeans` / `phoneme-align` and a pre-trained model for
/// `latent-kmeans`; the other methods ignore it.
pub fn build_targets(
    method: CodebookMethod,
    model: Option<&EncoderModel>,
    labeled: &[Utterance],
    unlabeled: &[Utterance],
    config: &PipelineConfig,
    seed: u64,
) -> Result<TargetOutcome, PipelineError> {
    let all: Vec<Utterance> = labeled.iter().chain(unlabeled).cloned().collect();
    let ids: Vec<&str> = all.iter().map(|u| u.id.as_str()).collect();
    let s = config.downsample_factor;
    match method {
        CodebookMethod::None => Err(PipelineError::Config("codebook_method = none builds no targets".into())),
        CodebookMethod::GroundTruth => Ok(TargetOutcome {
            targets: ground_truth_targets(&all, s, config.phoneme_inventory_size)?,
            codebook: None,
            skipped: Vec::new(),
            pseudo_transcripts: None,
        }),
        CodebookMethod::RawKmeans => {
            let blocks = all.iter().map(|u| stack_frames(&u.features, s)).collect();
            let source = CodebookSource {
                kind: FeatureKind::Raw,
                model_hash: None,
                layer: None,
            };
            kmeans_targets(blocks, &ids, source, Provenance::RawKmeans, config, seed)
        }
        CodebookMethod::CtcKmeans | CodebookMethod::LatentKmeans => {
            let (head, kind, provenance) = if method == CodebookMethod::CtcKmeans {
                (HeadKind::Ctc, FeatureKind::CtcLatent, Provenance::CtcKmeans)
            } else {
                (HeadKind::Targets, FeatureKind::PretrainedLatent, Provenance::LatentKmeans)
            };
            let model = require_head(model, head, method)?;
            let blocks = extract_layer_features(model, &all, config.kmeans_layer)?;
            let source = CodebookSource {
                kind,
                model_hash: Some(model.param_hash()),
                layer: Some(config.kmeans_layer),
            };
            kmeans_targets(blocks, &ids, source, provenance, config, seed)
        }
        CodebookMethod::PhonemeAlign => {
            let model = require_head(model, HeadKind::Ctc, method)?;
            let mut transcripts = BTreeMap::new();
            for u in labeled {
                let t = u
                    .transcript
                    .clone()
                    .ok_or_else(|| PipelineError::MissingTranscript(u.id.clone()))?;
                transcripts.insert(u.id.clone(), t);
            }
            let pseudo: BTreeMap<String, Vec<u16>> = unlabeled
                .iter()
                .map(|u| u.id.clone())
                .zip(greedy_transcripts(model, unlabeled)?)
                .collect();
            transcripts.extend(pseudo.clone());
            let report = frame_targets_from_model(
                model,
                &all,
                TargetMode::Align {
                    transcripts: &transcripts,
                },
                config.blank_policy,
            )?;
            Ok(TargetOutcome {
                targets: report.targets,
                codebook: None,
                skipped: report.skipped,
                pseudo_transcripts: Some(pseudo),
            })
        }
    }
}

/// Second-iteration targets: per-frame argmax of a pre-trained model.
pub fn predict_targets(
    model: &EncoderModel,
    labeled: &[Utterance],
    unlabeled: &[Utterance],
    config: &PipelineConfig,
) -> Result<TargetOutcome, PipelineError> {
    let all: Vec<Utterance> = labeled.iter().chain(unlabeled).cloned().collect();
    let report = frame_targets_from_model(model, &all, TargetMode::Predict, config.blank_policy)?;
    Ok(TargetOutcome {
        targets: report.targets,
        codebook: None,
        skipped: report.skipped,
        pseudo_transcripts: None,
    })
}

/// Quality of a target set against the ground-truth alignments at encoder
/// rate: frame accuracy (direct for phoneme-valued targets, majority-mapped for clusters), purity and NMI.
pub fn target_quality(
    targets: &TargetSet,
    utterances: &[&Utterance],
    downsample_factor: usize,
) -> Result<BTreeMap<String, f64>, PipelineError> {
    let truth_set = ground_truth_targets(utterances.iter().copied(), downsample_factor, usize::MAX)?;
    let truth: BTreeMap<String, Vec<u16>> = truth_set
        .entries
        .into_iter()
        .map(|e| (e.id, e.labels))
        .collect();
    let mut labels = Vec::new();
    let mut phones = Vec::new();
    for e in &targets.entries {
        if let Some(t) = truth.get(&e.id) {
            labels.extend_from_slice(&e.labels);
            phones.extend_from_slice(t);
        }
    }
    let mut out = BTreeMap::new();
    out.insert("frame_accuracy".into(), frame_accuracy(targets, &truth)?);
    let cm = cluster_metrics(&labels, &phones)?;
    out.insert("purity".into(), cm.purity);
    out.insert("nmi".into(), cm.nmi);
    Ok(out)
}

/// Error rate of pseudo-transcripts against the reference transcripts.
pub fn pseudo_transcript_error(
    pseudo: &BTreeMap<String, Vec<u16>>,
    utterances: &[Utterance],
) -> Result<f64, PipelineError> {
    let mut pairs = Vec::new();
    for u in utterances {
        if let Some(h) = pseudo.get(&u.id) {
            let r = reference_transcript(u).ok_or_else(|| PipelineError::MissingTranscript(u.id.clone()))?;
            pairs.push((r, h.clone()));
        }
    }
    Ok(corpus_error_rate(pairs.iter().map(|(r, h)| (r.as_slice(), h.as_slice()))).rate)
}
