//! Minibatch training loops for the seed, pre-training and fine-tuning stages.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::PipelineConfig;
use super::{derive_seed, PipelineError};
use crate::align::{ctc_greedy_decode, TargetSet};
use crate::corpus::{collapse_runs, Utterance};
use crate::eval::{corpus_error_rate, ErrorRateBreakdown};
use crate::nn::{
    finetune_loss, log_softmax_rows, masked_prediction_loss_weighted, sample_mask_with, AdamW,
    EncoderConfig, EncoderModel, ForwardOptions, HeadKind, MaskSpec, NnError, Parameters, Schedule,
    FRONTEND_PREFIX,
};

/// Per-step mean training loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean of the first and last `window` recorded losses.
    pub fn endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }
}

type Example = Option<(f64, Parameters)>;

/// Runs `schedule.total_steps` optimizer steps. Each step draws `batch`
/// example indices from a seeded sequence of shuffled epochs, evaluates them
/// (possibly in parallel) and sums gradients in batch order.
#[allow(clippy::too_many_arguments)]
fn train_loop<F>(
    stage: &str,
    model: &mut EncoderModel,
    config: &PipelineConfig,
    schedule: &Schedule,
    num_examples: usize,
    batch: usize,
    freeze_frontend: bool,
    seed: u64,
    example: F,
) -> Result<TrainLog, PipelineError>
where
    F: Fn(&EncoderModel, usize, u64) -> Result<Example, NnError> + Sync,
{
    let mut log = TrainLog::default();
    if schedule.total_steps == 0 || num_examples == 0 {
        return Ok(log);
    }
    let mut optimizer = AdamW::new(config.optimizer(), &model.params);
    if freeze_frontend {
        optimizer = optimizer.freeze(FRONTEND_PREFIX);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..schedule.total_steps {
        let mut picks = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                order = (0..num_examples).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push((order[cursor], rng.gen::<u64>()));
            cursor += 1;
        }
        let results: Vec<Result<Example, NnError>> = picks
            .par_iter()
            .map(|&(i, s)| example(model, i, s))
            .collect();
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        let mut used = 0usize;
        for r in results {
            if let Some((l, g)) = r? {
                loss += l;
                grads.add_assign(&g);
                used += 1;
            }
        }
        if used == 0 {
            log.losses.push(f64::NAN);
            continue;
        }
        loss /= used as f64;
        if !loss.is_finite() {
            return Err(PipelineError::Diverged {
                stage: stage.to_string(),
                step,
            });
        }
        grads.scale(1.0 / used as f64);
        optimizer
            .step(&mut model.params, &grads, schedule, step)
            .map_err(|e| match e {
                NnError::NonFiniteGradient { .. } => PipelineError::Diverged {
                    stage: stage.to_string(),
                    step,
                },
                other => other.into(),
            })?;
        log.losses.push(loss);
    }
    Ok(log)
}

fn dropout_seed(model: &EncoderModel, s: u64) -> Option<u64> {
    (model.config.dropout > 0.0).then_some(s)
}

/// CTC step on one utterance. Transcripts the frames cannot hold are skipped.
fn ctc_example(model: &EncoderModel, features: &Array2<f32>, transcript: &[u16], s: u64, frontend: bool) -> Result<Example, NnError> {
    let x = features.mapv(f64::from);
    let opts = ForwardOptions {
        mask: None,
        dropout_seed: dropout_seed(model, s),
    };
    let (out, cache) = model.forward(&x, &opts)?;
    let labels: Vec<u16> = transcript.iter().map(|&p| p + 1).collect();
    let (loss, mut grad) = match finetune_loss(&out.logits, &labels) {
        Ok(v) => v,
        Err(NnError::Ctc(crate::align::CtcError::InfeasibleTarget { .. })) => return Ok(None),
        Err(e) => return Err(e),
    };
    let norm = labels.len().max(1) as f64;
    grad.mapv_inplace(|g| g / norm);
    Ok(Some((loss / norm, model.backward(&cache, &grad, frontend))))
}

/// Supervised CTC training on `(features, transcript)` pairs, used for the
/// seed model, fine-tuning and self-training.
#[allow(clippy::too_many_arguments)]
pub fn train_ctc(
    stage: &str,
    model: &mut EncoderModel,
    data: &[(&Array2<f32>, &[u16])],
    config: &PipelineConfig,
    schedule: &Schedule,
    batch: usize,
    freeze_frontend: bool,
    seed: u64,
) -> Result<TrainLog, PipelineError> {
    if model.head != HeadKind::Ctc {
        return Err(PipelineError::Config(format!("{stage}: model lacks a CTC head")));
    }
    train_loop(
        stage,
        model,
        config,
        schedule,
        data.len(),
        batch,
        freeze_frontend,
        seed,
        |m, i, s| ctc_example(m, data[i].0, data[i].1, s, !freeze_frontend),
    )
}

/// Step 1: a CTC model trained on the labeled set only.
pub fn train_seed_model(
    labeled: &[Utterance],
    config: &PipelineConfig,
    seed: u64,
) -> Result<(EncoderModel, TrainLog), PipelineError> {
    let vocab = config.phoneme_inventory_size + 1;
    let encoder = EncoderConfig {
        dropout: config.seed_dropout,
        ..config.encoder_config(vocab)
    };
    let mut model = EncoderModel::new(encoder, HeadKind::Ctc, derive_seed(seed, "seed-init"))?;
    let data = transcribed(labeled)?;
    let log = train_ctc(
        "seed-train",
        &mut model,
        &data,
        config,
        &config.seed_schedule(),
        config.seed_batch,
        false,
        derive_seed(seed, "seed-train"),
    )?;
    Ok((model, log))
}

pub(crate) fn transcribed(utterances: &[Utterance]) -> Result<Vec<(&Array2<f32>, &[u16])>, PipelineError> {
    utterances
        .iter()
        .map(|u| {
            u.transcript
                .as_deref()
                .map(|t| (&u.features, t))
                .ok_or_else(|| PipelineError::MissingTranscript(u.id.clone()))
        })
        .collect()
}

/// Input to masked-prediction pre-training: features and frame targets only.
/// Transcripts are not reachable from here.
pub struct PretrainExample<'a> {
    pub features: &'a Array2<f32>,
    pub targets: &'a [u16],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub model: EncoderModel,
    pub log: TrainLog,
    /// Accuracy of masked-frame predictions on held-out utterances.
    pub heldout_masked_accuracy: Option<f64>,
}

fn crop<'a>(ex: &PretrainExample<'a>, s: usize, max_frames: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, &'a [u16]) {
    let frames = ex.targets.len();
    if frames <= max_frames {
        let x = ex.features.slice(s![..frames * s, ..]).mapv(f64::from);
        return (x, ex.targets);
    }
    let start = rng.gen_range(0..=frames - max_frames);
    let x = ex
        .features
        .slice(s![start * s..(start + max_frames) * s, ..])
        .mapv(f64::from);
    (x, &ex.targets[start..start + max_frames])
}

/// Span mask for one example; an empty draw is replaced by a single span at
/// a random start so every example contributes.
fn training_mask(frames: usize, config: &PipelineConfig, rng: &mut ChaCha8Rng) -> MaskSpec {
    let mask = sample_mask_with(frames, config.mask_prob, config.mask_length, rng);
    if !mask.is_empty() || frames == 0 {
        return mask;
    }
    let mut forced = MaskSpec::from_starts(frames, vec![rng.gen_range(0..frames)], config.mask_length);
    forced.start_prob = config.mask_prob;
    forced
}

/// Step 4: masked prediction of `vocab_size` frame targets from a fresh
/// initialization.
pub fn pretrain(
    examples: &[PretrainExample<'_>],
    vocab_size: usize,
    config: &PipelineConfig,
    seed: u64,
) -> Result<PretrainOutcome, PipelineError> {
    let s = config.downsample_factor;
    for ex in examples {
        if ex.targets.len() != ex.features.nrows() / s {
            return Err(PipelineError::Config(format!(
                "pretrain: {} targets for {} input frames at downsample {s}",
                ex.targets.len(),
                ex.features.nrows()
            )));
        }
    }
    let mut model = EncoderModel::new(
        config.encoder_config(vocab_size),
        HeadKind::Targets,
        derive_seed(seed, "pretrain-init"),
    )?;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain-holdout")));
    let held = ((examples.len() as f64) * config.pretrain_holdout).round() as usize;
    let (heldout, train) = order.split_at(held.min(examples.len().saturating_sub(1)));
    let mut train = train.to_vec();
    train.sort_unstable();

    let log = train_loop(
        "pretrain",
        &mut model,
        config,
        &config.pretrain_schedule(),
        train.len(),
        config.pretrain_batch,
        false,
        derive_seed(seed, "pretrain"),
        |m, i, s| {
            let ex = &examples[train[i]];
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (x, targets) = crop(ex, config.downsample_factor, config.crop_frames, &mut rng);
            if targets.is_empty() {
                return Ok(None);
            }
            let mask = training_mask(targets.len(), config, &mut rng);
            let opts = ForwardOptions {
                mask: Some(&mask),
                dropout_seed: dropout_seed(m, rng.gen()),
            };
            let (out, cache) = m.forward(&x, &opts)?;
            let (loss, grad) = masked_prediction_loss_weighted(&out.logits, targets, &mask, config.unmasked_weight)?;
            Ok(Some((loss, m.backward(&cache, &grad, true))))
        },
    )?;

    let heldout_masked_accuracy = if heldout.is_empty() {
        None
    } else {
        let eval_seed = derive_seed(seed, "pretrain-eval");
        let counts: Vec<Result<(usize, usize), NnError>> = heldout
            .par_iter()
            .map(|&i| {
                let mut rng = ChaCha8Rng::seed_from_u64(eval_seed ^ i as u64);
                let (x, targets) = crop(&examples[i], config.downsample_factor, config.crop_frames, &mut rng);
                if targets.is_empty() {
                    return Ok((0, 0));
                }
                let mask = training_mask(targets.len(), config, &mut rng);
                let opts = ForwardOptions {
                    mask: Some(&mask),
                    dropout_seed: None,
                };
                let (out, _) = model.forward(&x, &opts)?;
                let hits = mask
                    .masked
                    .iter()
                    .filter(|&&t| argmax(out.logits.row(t).as_slice().unwrap()) == targets[t] as usize)
                    .count();
                Ok((hits, mask.masked.len()))
            })
            .collect();
        let mut hits = 0;
        let mut total = 0;
        for c in counts {
            let (h, t) = c?;
            hits += h;
            total += t;
        }
        (total > 0).then(|| hits as f64 / total as f64)
    };
    Ok(PretrainOutcome {
        model,
        log,
        heldout_masked_accuracy,
    })
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Pre-trained encoder with a fresh CTC head over `P + 1` classes.
pub fn ctc_student(pretrained: &EncoderModel, config: &PipelineConfig, seed: u64) -> EncoderModel {
    pretrained.with_new_head(HeadKind::Ctc, config.phoneme_inventory_size + 1, derive_seed(seed, "ctc-head"))
}

/// Step 6: CTC fine-tuning with a tri-stage schedule. With
/// `freeze_frontend` the frontend parameters are left bit-identical.
pub fn finetune(
    model: &EncoderModel,
    data: &[(&Array2<f32>, &[u16])],
    config: &PipelineConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<(EncoderModel, TrainLog), PipelineError> {
    let mut student = model.clone();
    let log = train_ctc(
        "finetune",
        &mut student,
        data,
        config,
        schedule,
        config.finetune_batch,
        config.freeze_frontend,
        seed,
    )?;
    Ok((student, log))
}

/// Greedy CTC transcripts (phoneme ids) for each utterance.
pub fn greedy_transcripts(model: &EncoderModel, utterances: &[Utterance]) -> Result<Vec<Vec<u16>>, PipelineError> {
    if model.head != HeadKind::Ctc {
        return Err(PipelineError::Config("decoding needs a CTC head".into()));
    }
    utterances
        .par_iter()
        .map(|u| {
            let out = model.infer(&u.features)?;
            let lp = log_softmax_rows(&out.logits.view());
            Ok(ctc_greedy_decode(&lp.view()).into_iter().map(|c| c - 1).collect())
        })
        .collect()
}

/// Reference phoneme sequence of an utterance: its transcript, or the
/// collapsed ground-truth alignment when the transcript was stripped.
pub fn reference_transcript(u: &Utterance) -> Option<Vec<u16>> {
    u.transcript
        .clone()
        .or_else(|| u.truth_alignment.as_deref().map(collapse_runs))
}

/// Phoneme error rate of greedy decoding against reference transcripts.
pub fn phoneme_error_rate(model: &EncoderModel, utterances: &[Utterance]) -> Result<ErrorRateBreakdown, PipelineError> {
    let hyps = greedy_transcripts(model, utterances)?;
    let refs: Vec<Vec<u16>> = utterances
        .iter()
        .map(|u| reference_transcript(u).ok_or_else(|| PipelineError::MissingTranscript(u.id.clone())))
        .collect::<Result<_, _>>()?;
    Ok(corpus_error_rate(
        refs.iter().zip(&hyps).map(|(r, h)| (r.as_slice(), h.as_slice())),
    ))
}

pub struct SelfTrainOutcome {
    pub model: EncoderModel,
    pub log: TrainLog,
    pub pseudo_transcripts: Vec<Vec<u16>>,
}

/// Step 7: pseudo-label every unlabeled utterance with the teacher (no
/// filtering), mix with the labeled set, and fine-tune a student. The
/// student trains with `selftrain_dropout`; the returned model keeps the
/// initialization's dropout setting.
pub fn self_train_round(
    teacher: &EncoderModel,
    student_init: &EncoderModel,
    labeled: &[Utterance],
    unlabeled: &[Utterance],
    config: &PipelineConfig,
    seed: u64,
) -> Result<SelfTrainOutcome, PipelineError> {
    let pseudo = greedy_transcripts(teacher, unlabeled)?;
    let mut data = transcribed(labeled)?;
    data.extend(unlabeled.iter().zip(&pseudo).map(|(u, t)| (&u.features, t.as_slice())));
    let mut student = student_init.clone();
    student.config.dropout = config.selftrain_dropout;
    let (mut model, log) = finetune(&student, &data, config, &config.selftrain_schedule(), seed)?;
    model.config.dropout = student_init.config.dropout;
    Ok(SelfTrainOutcome {
        model,
        log,
        pseudo_transcripts: pseudo,
    })
}

/// Examples for pre-training: each utterance paired with its targets, in
/// target-set order. Utterances without targets are left out.
pub fn pretrain_examples<'a>(utterances: &[&'a Utterance], targets: &'a TargetSet) -> Vec<PretrainExample<'a>> {
    let index = targets.index();
    utterances
        .iter()
        .filter_map(|u| {
            index.get(u.id.as_str()).map(|t| PretrainExample {
                features: &u.features,
                targets: t,
            })
        })
        .collect()
}
