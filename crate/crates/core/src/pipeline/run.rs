use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use super::config::{CodebookMethod, PipelineConfig};
use super::report::{PipelineReport, StageReport};
use super::store::Workspace;
use super::targets::{build_targets, predict_targets, pseudo_transcript_error, target_quality, TargetOutcome};
use super::train::{
    ctc_student, finetune, phoneme_error_rate, pretrain, pretrain_examples, self_train_round,
    train_seed_model, transcribed, TrainLog,
};
use super::{derive_seed, PipelineError};
use crate::align::save_targets;
use crate::corpus::{generate_corpus, load_corpus, save_corpus, split_corpus, Corpus, CorpusSpec, Utterance};
use crate::io;
use crate::nn::{load_checkpoint, save_checkpoint, EncoderModel, HeadKind, FRONTEND_PREFIX};
use crate::quantize::save_codebook;

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Allow writing into a non-empty output directory.
    pub force: bool,
}

const CORPORA: [&str; 4] = ["labeled", "unlabeled", "eval-clean", "eval-noisy"];

/// The four corpora of a run.
#[derive(Debug, Clone)]
pub struct CorpusSet {
    pub labeled: Corpus,
    pub unlabeled: Corpus,
    pub eval_clean: Corpus,
    pub eval_noisy: Corpus,
}

impl CorpusSet {
    /// Generates all corpora from the config's world and seeds. Corpora
    /// given by path are loaded instead.
    pub fn from_config(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let world = config.world();
        let world_seed = derive_seed(config.seed, "world");
        let make = |label: &str, n: usize, noise: f64| -> Result<Corpus, PipelineError> {
            let spec = CorpusSpec::from_world(&world, world_seed, derive_seed(config.seed, label), n, noise);
            Ok(generate_corpus(&spec)?)
        };
        let load = |p: &Option<std::path::PathBuf>| p.as_deref().map(load_corpus).transpose();
        let (labeled, unlabeled) = match (load(&config.labeled_path)?, load(&config.unlabeled_path)?) {
            (Some(l), Some(u)) => (l, u),
            (None, None) => {
                let full = make("corpus", config.num_utterances, config.noise_scale)?;
                split_corpus(&full, config.labeled_fraction, derive_seed(config.seed, "split"))?
            }
            _ => {
                return Err(PipelineError::Config(
                    "labeled_path and unlabeled_path must be given together".into(),
                ))
            }
        };
        let eval_clean = match load(&config.eval_clean_path)? {
            Some(c) => c,
            None => make("eval-clean", config.eval_utterances, config.eval_clean_noise)?,
        };
        let eval_noisy = match load(&config.eval_noisy_path)? {
            Some(c) => c,
            None => make("eval-noisy", config.eval_utterances, config.eval_noisy_noise)?,
        };
        Ok(CorpusSet {
            labeled,
            unlabeled,
            eval_clean,
            eval_noisy,
        })
    }

    fn get(&self, name: &str) -> &Corpus {
        match name {
            "labeled" => &self.labeled,
            "unlabeled" => &self.unlabeled,
            "eval-clean" => &self.eval_clean,
            _ => &self.eval_noisy,
        }
    }
}

fn stage_err(stage: &str) -> impl FnOnce(PipelineError) -> PipelineError + '_ {
    move |e| PipelineError::StageFailed {
        stage: stage.to_string(),
        source: Box::new(e),
    }
}

fn put(stage: &mut StageReport, key: &str, value: f64) {
    if value.is_finite() {
        stage.metrics.insert(key.to_string(), value);
    }
}

fn put_log(stage: &mut StageReport, log: &TrainLog) {
    if let Some((first, last)) = log.endpoints(20) {
        put(stage, "loss_first", first);
        put(stage, "loss_last", last);
    }
    put(stage, "steps", log.losses.len() as f64);
}

fn load_corpus_verified(ws: &Workspace, name: &str) -> Result<Corpus, PipelineError> {
    Ok(load_corpus(&ws.verified(&format!("corpus.{name}"))?)?)
}

fn load_model_verified(ws: &Workspace, name: &str) -> Result<EncoderModel, PipelineError> {
    Ok(load_checkpoint(&ws.verified(&format!("model.{name}"))?)?)
}

fn save_model(ws: &mut Workspace, stage: &mut StageReport, name: &str, model: &EncoderModel) -> Result<(), PipelineError> {
    let rel = format!("models/{name}.ckpt");
    save_checkpoint(model, &ws.path(&rel))?;
    stage.artifacts.push(ws.record(&format!("model.{name}"), &rel)?);
    Ok(())
}

fn corpus_stage(config: &PipelineConfig, ws: &mut Workspace) -> Result<StageReport, PipelineError> {
    let mut stage = StageReport::new("corpus");
    let set = CorpusSet::from_config(config)?;
    for name in CORPORA {
        let corpus = set.get(name);
        let rel = format!("corpus/{name}");
        save_corpus(corpus, &ws.path(&rel))?;
        stage.artifacts.push(ws.record(&format!("corpus.{name}"), &rel)?);
        put(&mut stage, &format!("{name}_utterances"), corpus.len() as f64);
        put(&mut stage, &format!("{name}_frames"), corpus.total_frames() as f64);
    }
    Ok(stage)
}

fn add_per(stage: &mut StageReport, ws: &Workspace, model: &EncoderModel) -> Result<(), PipelineError> {
    for (key, name) in [("per_clean", "eval-clean"), ("per_noisy", "eval-noisy")] {
        let corpus = load_corpus_verified(ws, name)?;
        put(stage, key, phoneme_error_rate(model, &corpus.utterances)?.rate);
    }
    Ok(())
}

fn seed_stage(config: &PipelineConfig, ws: &mut Workspace) -> Result<StageReport, PipelineError> {
    let mut stage = StageReport::new("seed-train");
    let labeled = load_corpus_verified(ws, "labeled")?;
    let (model, log) = train_seed_model(&labeled.utterances, config, config.seed)?;
    put_log(&mut stage, &log);
    save_model(ws, &mut stage, "seed", &model)?;
    add_per(&mut stage, ws, &model)?;
    Ok(stage)
}

fn needs_seed_model(config: &PipelineConfig) -> bool {
    config.pretrain_iterations > 0
        && matches!(
            config.codebook_method,
            CodebookMethod::CtcKmeans | CodebookMethod::PhonemeAlign
        )
}

/// Saves targets (and codebook) under `targets/{label}` and reports their
/// quality against ground truth.
fn record_targets(
    ws: &mut Workspace,
    stage: &mut StageReport,
    label: &str,
    outcome: &TargetOutcome,
    labeled: &Corpus,
    unlabeled: &Corpus,
    config: &PipelineConfig,
) -> Result<(), PipelineError> {
    let rel = format!("targets/{label}");
    save_targets(&outcome.targets, &ws.path(&rel))?;
    stage.artifacts.push(ws.record(&format!("targets.{label}"), &rel)?);
    if let Some(cb) = &outcome.codebook {
        let rel = format!("codebooks/{label}");
        save_codebook(cb, &ws.path(&rel))?;
        stage.artifacts.push(ws.record(&format!("codebook.{label}"), &rel)?);
        if let Some(&d) = cb.distortion_history.last() {
            put(stage, "kmeans_distortion", d);
        }
        put(stage, "kmeans_iterations", cb.distortion_history.len() as f64);
    }
    let all: Vec<&Utterance> = labeled.utterances.iter().chain(&unlabeled.utterances).collect();
    for (k, v) in target_quality(&outcome.targets, &all, config.downsample_factor)? {
        put(stage, &k, v);
    }
    put(stage, "vocab_size", outcome.targets.vocab_size as f64);
    put(stage, "utterances", outcome.targets.len() as f64);
    put(stage, "skipped", outcome.skipped.len() as f64);
    if let Some(pseudo) = &outcome.pseudo_transcripts {
        put(stage, "pseudo_transcript_error", pseudo_transcript_error(pseudo, &unlabeled.utterances)?);
    }
    Ok(())
}

/// Pre-trains on targets stored under `targets.{label}`; the labeled
/// corpus enters without transcripts.
fn pretrain_stage(
    config: &PipelineConfig,
    ws: &mut Workspace,
    stage_name: &str,
    label: &str,
    model_name: &str,
) -> Result<StageReport, PipelineError> {
    let mut stage = StageReport::new(stage_name);
    let targets = crate::align::load_targets(&ws.verified(&format!("targets.{label}"))?)?;
    let labeled = load_corpus_verified(ws, "labeled")?.without_transcripts();
    let unlabeled = load_corpus_verified(ws, "unlabeled")?;
    let utts: Vec<&Utterance> = labeled.utterances.iter().chain(&unlabeled.utterances).collect();
    let examples = pretrain_examples(&utts, &targets);
    let outcome = pretrain(&examples, targets.vocab_size, config, derive_seed(config.seed, stage_name))?;
    put_log(&mut stage, &outcome.log);
    put(&mut stage, "examples", examples.len() as f64);
    if let Some(acc) = outcome.heldout_masked_accuracy {
        put(&mut stage, "heldout_masked_accuracy", acc);
    }
    put(&mut stage, "chance_accuracy", 1.0 / targets.vocab_size as f64);
    save_model(ws, &mut stage, model_name, &outcome.model)?;
    Ok(stage)
}

fn targets_stage(
    config: &PipelineConfig,
    ws: &mut Workspace,
    stage_name: &str,
    label: &str,
    method: Option<CodebookMethod>,
    model_name: Option<&str>,
) -> Result<StageReport, PipelineError> {
    let mut stage = StageReport::new(stage_name);
    let labeled = load_corpus_verified(ws, "labeled")?;
    let unlabeled = load_corpus_verified(ws, "unlabeled")?;
    let model = model_name.map(|m| load_model_verified(ws, m)).transpose()?;
    let outcome = match method {
        Some(method) => build_targets(
            method,
            model.as_ref(),
            &labeled.utterances,
            &unlabeled.utterances,
            config,
            derive_seed(config.seed, stage_name),
        )?,
        None => predict_targets(
            model.as_ref().expect("model-predict needs a model"),
            &labeled.utterances,
            &unlabeled.utterances,
            config,
        )?,
    };
    record_targets(ws, &mut stage, label, &outcome, &labeled, &unlabeled, config)?;
    Ok(stage)
}

fn frontend_unchanged(before: &EncoderModel, after: &EncoderModel) -> f64 {
    let same = before.params.hash_prefix(FRONTEND_PREFIX) == after.params.hash_prefix(FRONTEND_PREFIX);
    if same {
        1.0
    } else {
        0.0
    }
}

fn initial_student(config: &PipelineConfig, ws: &Workspace, pretrained: Option<&str>, fresh: bool) -> Result<EncoderModel, PipelineError> {
    match pretrained {
        Some(name) if !fresh => Ok(ctc_student(&load_model_verified(ws, name)?, config, config.seed)),
        _ => Ok(EncoderModel::new(
            config.encoder_config(config.phoneme_inventory_size + 1),
            HeadKind::Ctc,
            derive_seed(config.seed, "scratch-init"),
        )?),
    }
}

fn finetune_stage(config: &PipelineConfig, ws: &mut Workspace, pretrained: Option<&str>) -> Result<StageReport, PipelineError> {
    let mut stage = StageReport::new("finetune");
    let init = initial_student(config, ws, pretrained, false)?;
    let labeled = load_corpus_verified(ws, "labeled")?;
    let data = transcribed(&labeled.utterances)?;
    let (model, log) = finetune(
        &init,
        &data,
        config,
        &config.finetune_schedule(),
        derive_seed(config.seed, "finetune"),
    )?;
    put_log(&mut stage, &log);
    put(&mut stage, "frontend_unchanged", frontend_unchanged(&init, &model));
    save_model(ws, &mut stage, "finetune", &model)?;
    add_per(&mut stage, ws, &model)?;
    Ok(stage)
}

fn selftrain_stage(
    config: &PipelineConfig,
    ws: &mut Workspace,
    round: usize,
    teacher: &str,
    pretrained: Option<&str>,
) -> Result<StageReport, PipelineError> {
    let name = format!("selftrain-{round}");
    let mut stage = StageReport::new(&name);
    let teacher = load_model_verified(ws, teacher)?;
    let init = initial_student(config, ws, pretrained, config.selftrain_fresh_student)?;
    let labeled = load_corpus_verified(ws, "labeled")?;
    let unlabeled = load_corpus_verified(ws, "unlabeled")?;
    let outcome = self_train_round(
        &teacher,
        &init,
        &labeled.utterances,
        &unlabeled.utterances,
        config,
        derive_seed(config.seed, &name),
    )?;
    put_log(&mut stage, &outcome.log);
    let pseudo: BTreeMap<String, Vec<u16>> = unlabeled
        .utterances
        .iter()
        .map(|u| u.id.clone())
        .zip(outcome.pseudo_transcripts.iter().cloned())
        .collect();
    put(&mut stage, "pseudo_transcript_error", pseudo_transcript_error(&pseudo, &unlabeled.utterances)?);
    put(&mut stage, "pseudo_coverage", pseudo.len() as f64 / unlabeled.len().max(1) as f64);
    put(&mut stage, "frontend_unchanged", frontend_unchanged(&init, &outcome.model));
    save_model(ws, &mut stage, &format!("selftrain-{round}"), &outcome.model)?;
    add_per(&mut stage, ws, &outcome.model)?;
    Ok(stage)
}

struct Runner<'a> {
    config: &'a PipelineConfig,
    ws: Workspace,
    report: PipelineReport,
    timings: Vec<(String, f64)>,
}

impl Runner<'_> {
    fn stage<F>(&mut self, name: &str, f: F) -> Result<(), PipelineError>
    where
        F: FnOnce(&PipelineConfig, &mut Workspace) -> Result<StageReport, PipelineError>,
    {
        let start = Instant::now();
        let stage = f(self.config, &mut self.ws).map_err(stage_err(name))?;
        self.timings.push((name.to_string(), start.elapsed().as_secs_f64()));
        self.report.stages.push(stage);
        Ok(())
    }

    /// Steps 3 through 7 for the configured method.
    fn method_stages(&mut self) -> Result<(), PipelineError> {
        let config = self.config;
        let method = config.codebook_method;
        let mut pretrained: Option<String> = None;
        for iter in 1..=config.pretrain_iterations {
            let label = format!("iter{iter}");
            let targets_name = format!("targets-{iter}");
            if iter == 1 {
                let source_model = match method {
                    CodebookMethod::CtcKmeans | CodebookMethod::PhonemeAlign => Some("seed"),
                    CodebookMethod::LatentKmeans => {
                        self.stage("bootstrap-targets", |c, ws| {
                            targets_stage(c, ws, "bootstrap-targets", "bootstrap", Some(CodebookMethod::RawKmeans), None)
                        })?;
                        self.stage("bootstrap-pretrain", |c, ws| {
                            pretrain_stage(c, ws, "bootstrap-pretrain", "bootstrap", "bootstrap")
                        })?;
                        Some("bootstrap")
                    }
                    _ => None,
                };
                self.stage(&targets_name, |c, ws| {
                    targets_stage(c, ws, &targets_name, &label, Some(method), source_model)
                })?;
            } else {
                let prev = pretrained.clone().expect("previous iteration");
                self.stage(&targets_name, |c, ws| {
                    targets_stage(c, ws, &targets_name, &label, None, Some(&prev))
                })?;
            }
            let stage_name = format!("pretrain-{iter}");
            let model_name = format!("pretrain-{iter}");
            self.stage(&stage_name, |c, ws| pretrain_stage(c, ws, &stage_name, &label, &model_name))?;
            pretrained = Some(model_name);
        }

        self.stage("finetune", |c, ws| finetune_stage(c, ws, pretrained.as_deref()))?;
        let mut teacher = "finetune".to_string();
        for round in 1..=config.self_training_rounds {
            let name = format!("selftrain-{round}");
            self.stage(&name, |c, ws| selftrain_stage(c, ws, round, &teacher, pretrained.as_deref()))?;
            teacher = name;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<PipelineReport, PipelineError> {
        let summary = &mut self.report.summary;
        if let Some(ft) = self.report.stages.iter().find(|s| s.name == "finetune") {
            for key in ["per_clean", "per_noisy"] {
                if let Some(v) = ft.metric(key) {
                    summary.insert(format!("finetune_{key}"), v);
                }
            }
        }
        if let Some(last) = self
            .report
            .stages
            .iter()
            .rev()
            .find(|s| s.name == "finetune" || s.name.starts_with("selftrain-"))
        {
            for key in ["per_clean", "per_noisy"] {
                if let Some(v) = last.metric(key) {
                    summary.insert(format!("final_{key}"), v);
                }
            }
        }
        if let Some(t) = self.report.stages.iter().find(|s| s.name == "targets-1") {
            for key in ["nmi", "purity", "frame_accuracy"] {
                if let Some(v) = t.metric(key) {
                    summary.insert(format!("targets_{key}"), v);
                }
            }
        }
        io::write_file(&self.ws.path("report.json"), self.report.to_json().as_bytes())?;
        io::write_file(&self.ws.path("report.txt"), self.report.to_text().as_bytes())?;
        let timings: BTreeMap<&str, f64> = self.timings.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let mut t = serde_json::to_string_pretty(&timings).expect("timings serialize");
        t.push('\n');
        io::write_file(&self.ws.path("timings.json"), t.as_bytes())?;
        Ok(self.report)
    }
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

fn new_runner<'a>(config: &'a PipelineConfig, ws: Workspace) -> Result<Runner<'a>, PipelineError> {
    io::write_file(&ws.path("config.cfg"), config.to_text().as_bytes())?;
    Ok(Runner {
        config,
        ws,
        report: PipelineReport {
            config: config.entries().into_iter().collect(),
            ..Default::default()
        },
        timings: Vec::new(),
    })
}

/// Runs every stage in order into `out_dir` and writes `report.json`,
/// `report.txt` and `timings.json` there.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path, options: RunOptions) -> Result<PipelineReport, PipelineError> {
    config.validate()?;
    with_workers(config.workers, || {
        let ws = Workspace::create(out_dir, options.force)?;
        let mut runner = new_runner(config, ws)?;
        runner.stage("corpus", corpus_stage)?;
        if needs_seed_model(config) {
            runner.stage("seed-train", seed_stage)?;
        }
        runner.method_stages()?;
        runner.finish()
    })
}

/// One arm of a method comparison: a name and overrides of keys that do not
/// affect the shared corpora or seed model.
#[derive(Debug, Clone)]
pub struct Arm {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Arm {
    pub fn method(method: CodebookMethod) -> Self {
        let mut overrides = vec![("codebook_method".to_string(), method.as_str().to_string())];
        if method == CodebookMethod::None {
            overrides.push(("pretrain_iterations".into(), "0".into()));
        }
        Arm {
            name: method.as_str().to_string(),
            overrides,
        }
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.overrides.push((key.to_string(), value.to_string()));
        self
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }
}

/// Keys an arm may override; everything else shapes the shared stages.
const ARM_KEYS: &[&str] = &[
    "codebook_method",
    "kmeans_k",
    "kmeans_layer",
    "kmeans_max_iters",
    "kmeans_rel_tol",
    "kmeans_subsample",
    "blank_policy",
    "pretrain_iterations",
    "pretrain_steps",
    "pretrain_batch",
    "pretrain_lr",
    "pretrain_warmup",
    "mask_prob",
    "mask_length",
    "unmasked_weight",
    "crop_frames",
    "pretrain_holdout",
    "finetune_steps",
    "finetune_batch",
    "finetune_lr",
    "finetune_warmup",
    "finetune_hold",
    "freeze_frontend",
    "self_training_rounds",
    "selftrain_steps",
    "selftrain_dropout",
    "selftrain_fresh_student",
];

/// Artifacts shared by every arm of a comparison.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub report: PipelineReport,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub shared: SeedArtifacts,
    pub arms: Vec<(String, PipelineReport)>,
}

impl Comparison {
    pub fn arm(&self, name: &str) -> Option<&PipelineReport> {
        self.arms.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

/// Runs several arms against one set of corpora and one seed model:
/// `root/shared` holds those, `root/<arm>` each arm's own stages.
pub fn compare_methods(base: &PipelineConfig, arms: &[Arm], root: &Path, options: RunOptions) -> Result<Comparison, PipelineError> {
    base.validate()?;
    let mut configs = Vec::new();
    for arm in arms {
        if arm.name.is_empty() || arm.name == "shared" || arm.name.contains(['/', '\\']) {
            return Err(PipelineError::Config(format!("invalid arm name {:?}", arm.name)));
        }
        let mut c = base.clone();
        for (k, _) in &arm.overrides {
            if !ARM_KEYS.contains(&k.as_str()) {
                return Err(PipelineError::Config(format!("arm {} may not override {k}", arm.name)));
            }
        }
        c.apply_overrides(arm.overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        c.validate()?;
        configs.push(c);
    }
    with_workers(base.workers, || {
        let shared_ws = Workspace::create(&root.join("shared"), options.force)?;
        let mut shared = new_runner(base, shared_ws)?;
        shared.stage("corpus", corpus_stage)?;
        if configs.iter().any(needs_seed_model) {
            shared.stage("seed-train", seed_stage)?;
        }
        let shared_ws = shared.ws.clone();
        let shared_report = shared.finish()?;

        let mut out = Vec::new();
        for (arm, config) in arms.iter().zip(&configs) {
            let mut ws = Workspace::create(&root.join(&arm.name), options.force)?;
            for rec in shared_ws.records() {
                ws.adopt(&shared_ws, &rec.name, &format!("../shared/{}", rec.path))?;
            }
            let mut runner = new_runner(config, ws)?;
            runner.method_stages()?;
            out.push((arm.name.clone(), runner.finish()?));
        }
        Ok(Comparison {
            shared: SeedArtifacts { report: shared_report },
            arms: out,
        })
    })
}
