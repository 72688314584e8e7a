//! Individual pipeline stages on small corpora and constructed models.

use std::collections::BTreeMap;

use ndarray::Array2;
use sgcb_core::align::{frame_targets_from_model, BlankPolicy, TargetMode};
use sgcb_core::corpus::{generate_corpus, split_corpus, Corpus, CorpusSpec, WorldParams};
use sgcb_core::nn::{EncoderConfig, EncoderModel, HeadKind, Schedule, FRONTEND_PREFIX};
use sgcb_core::pipeline::{
    build_targets, ctc_student, finetune, greedy_transcripts, phoneme_error_rate, pretrain,
    pretrain_examples, self_train_round, target_quality, train_seed_model, CodebookMethod,
    PipelineConfig,
};
use sgcb_core::Utterance;

const P: usize = 4;

/// Four phonemes whose emissions are nearly noiseless one-hot vectors.
fn one_hot_corpus(n: usize, seed: u64) -> Corpus {
    let world = WorldParams {
        phoneme_inventory_size: P,
        feature_dim: P,
        ..WorldParams::default()
    };
    let mut spec = CorpusSpec::from_world(&world, 1, seed, n, 0.0);
    for (p, e) in spec.emissions.iter_mut().enumerate() {
        e.mean = (0..P).map(|k| if k == p { 4.0 } else { 0.0 }).collect();
        e.var = vec![1e-4; P];
    }
    generate_corpus(&spec).unwrap()
}

/// Zero-layer, stride-1 CTC model whose logits peak at `phoneme + 1` on
/// every frame of [`one_hot_corpus`] data.
fn peaked_model() -> EncoderModel {
    let config = EncoderConfig {
        input_dim: P,
        num_layers: 0,
        hidden_dim: P,
        num_heads: 1,
        ffn_dim: 4,
        downsample_factor: 1,
        num_buckets: 4,
        max_distance: 8,
        vocab_size: P + 1,
        dropout: 0.0,
    };
    let mut model = EncoderModel::new(config, HeadKind::Ctc, 0).unwrap();
    let params = &mut model.params;
    params.frontend[0].weight = Array2::eye(P);
    params.frontend[0].bias.fill(0.0);
    params.frontend_norm.gain.fill(1.0);
    params.frontend_norm.bias.fill(0.0);
    params.head.weight = Array2::from_shape_fn((P, P + 1), |(h, c)| if c == h + 1 { 10.0 } else { 0.0 });
    params.head.bias.fill(0.0);
    model
}

fn small_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.apply_overrides([
        ("phoneme_inventory_size", "4"),
        ("feature_dim", "4"),
        ("hidden_dim", "16"),
        ("ffn_dim", "32"),
        ("num_heads", "2"),
    ])
    .unwrap();
    c
}

fn truth_at_rate(utts: &[Utterance]) -> BTreeMap<String, Vec<u16>> {
    utts.iter()
        .map(|u| (u.id.clone(), u.truth_alignment.clone().unwrap()))
        .collect()
}

#[test]
fn peaked_model_recovers_alignments() {
    let corpus = one_hot_corpus(30, 2);
    let model = peaked_model();
    let transcripts: BTreeMap<String, Vec<u16>> = corpus
        .utterances
        .iter()
        .map(|u| (u.id.clone(), u.transcript.clone().unwrap()))
        .collect();
    let truth = truth_at_rate(&corpus.utterances);
    for mode in [TargetMode::Align { transcripts: &transcripts }, TargetMode::Predict] {
        let report = frame_targets_from_model(&model, &corpus.utterances, mode, BlankPolicy::InheritPrevious).unwrap();
        assert!(report.skipped.is_empty());
        let (mut hit, mut total) = (0, 0);
        for e in &report.targets.entries {
            let t = &truth[&e.id];
            hit += e.labels.iter().zip(t).filter(|(a, b)| a == b).count();
            total += t.len();
        }
        assert!(hit as f64 / total as f64 > 0.99, "{hit}/{total}");
    }
}

#[test]
fn phoneme_align_with_peaked_model() {
    let corpus = one_hot_corpus(40, 3);
    let (labeled, unlabeled) = split_corpus(&corpus, 0.25, 1).unwrap();
    let mut config = small_config();
    config.downsample_factor = 1;
    let model = peaked_model();
    let out = build_targets(
        CodebookMethod::PhonemeAlign,
        Some(&model),
        &labeled.utterances,
        &unlabeled.utterances,
        &config,
        0,
    )
    .unwrap();
    let all: Vec<&Utterance> = labeled.utterances.iter().chain(&unlabeled.utterances).collect();
    let quality = target_quality(&out.targets, &all, 1).unwrap();
    assert!(quality["frame_accuracy"] > 0.99, "{quality:?}");
    // The teacher is perfect, so pseudo-transcripts are exact.
    assert_eq!(phoneme_error_rate(&model, &unlabeled.utterances).unwrap().rate, 0.0);
}

#[test]
fn seed_training_halves_the_loss() {
    let world = WorldParams {
        phoneme_inventory_size: P,
        feature_dim: 4,
        ..WorldParams::default()
    };
    let corpus = generate_corpus(&CorpusSpec::from_world(&world, 4, 5, 20, 0.3)).unwrap();
    let mut config = small_config();
    config.seed_steps = 2000;
    let (_, log) = train_seed_model(&corpus.utterances, &config, 6).unwrap();
    let first = log.losses[0];
    let (_, last) = log.endpoints(20).unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn zero_step_seed_model_is_the_initialisation() {
    let corpus = one_hot_corpus(8, 1);
    let mut config = small_config();
    config.seed_steps = 0;
    let (a, log) = train_seed_model(&corpus.utterances, &config, 9).unwrap();
    let (b, _) = train_seed_model(&corpus.utterances, &config, 9).unwrap();
    assert!(log.losses.is_empty());
    assert_eq!(a.params.hash(), b.params.hash());
}

#[test]
fn pretraining_starts_near_uniform_and_beats_chance() {
    let corpus = one_hot_corpus(60, 7);
    let mut config = small_config();
    config.pretrain_steps = 300;
    config.mask_length = 3;
    config.pretrain_holdout = 0.2;
    let truth = sgcb_core::align::ground_truth_targets(corpus.utterances.iter(), 2, P).unwrap();
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let examples = pretrain_examples(&utts, &truth);
    let out = pretrain(&examples, P, &config, 3).unwrap();
    assert!((out.log.losses[0] - (P as f64).ln()).abs() < 0.1, "{}", out.log.losses[0]);
    let acc = out.heldout_masked_accuracy.unwrap();
    assert!(acc > 1.0 / P as f64, "held-out masked accuracy {acc}");
}

#[test]
fn finetuning_keeps_the_frontend_and_zero_steps_is_identity() {
    let corpus = one_hot_corpus(16, 8);
    let config = small_config();
    let base = EncoderModel::new(config.encoder_config(P), HeadKind::Targets, 1).unwrap();
    let student = ctc_student(&base, &config, 2);
    let data: Vec<(&Array2<f32>, &[u16])> = corpus
        .utterances
        .iter()
        .map(|u| (&u.features, u.transcript.as_deref().unwrap()))
        .collect();

    let (tuned, log) = finetune(&student, &data, &config, &Schedule::tri_stage(20, 0.1, 0.4, 2e-3), 4).unwrap();
    assert_eq!(log.losses.len(), 20);
    assert_eq!(
        tuned.params.hash_prefix(FRONTEND_PREFIX),
        student.params.hash_prefix(FRONTEND_PREFIX)
    );
    assert_ne!(tuned.params.hash(), student.params.hash());

    let (same, _) = finetune(&student, &data, &config, &Schedule::tri_stage(0, 0.1, 0.4, 2e-3), 4).unwrap();
    assert_eq!(same.params, student.params);
}

#[test]
fn self_training_labels_every_unlabeled_utterance() {
    let corpus = one_hot_corpus(24, 9);
    let (labeled, unlabeled) = split_corpus(&corpus, 0.25, 2).unwrap();
    let mut config = small_config();
    config.downsample_factor = 1;
    config.selftrain_steps = 5;
    let teacher = peaked_model();
    let out = self_train_round(&teacher, &teacher, &labeled.utterances, &unlabeled.utterances, &config, 1).unwrap();
    assert_eq!(out.pseudo_transcripts.len(), unlabeled.len());
    // A perfect teacher yields the true transcripts.
    let refs = greedy_transcripts(&teacher, &unlabeled.utterances).unwrap();
    for (u, (pseudo, r)) in unlabeled.utterances.iter().zip(out.pseudo_transcripts.iter().zip(&refs)) {
        assert_eq!(pseudo, r);
        assert_eq!(pseudo, &sgcb_core::corpus::collapse_runs(u.truth_alignment.as_ref().unwrap()));
    }
}
