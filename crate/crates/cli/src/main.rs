//! `sgcb`: every pipeline stage, plus the whole pipeline, from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sgcb_core::align::{load_targets, read_targets_header, save_targets};
use sgcb_core::corpus::{generate_corpus, load_corpus, read_corpus_meta, save_corpus, split_corpus, CorpusSpec};
use sgcb_core::eval::{cluster_metrics, frame_accuracy};
use sgcb_core::nn::{load_checkpoint, read_checkpoint_header, save_checkpoint, EncoderModel, HeadKind};
use sgcb_core::pipeline::{
    build_targets, ctc_student, derive_seed, finetune, phoneme_error_rate, predict_targets, pretrain,
    pretrain_examples, run_pipeline, self_train_round, train_seed_model, CodebookMethod, PipelineConfig,
    PipelineError, RunOptions,
};
use sgcb_core::quantize::save_codebook;
use sgcb_core::{align::ground_truth_targets, io};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "SGCB_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "sgcb", version, about = "Supervision-guided codebooks for masked-prediction pre-training")]
struct Cli {
    /// Worker threads for intra-stage parallelism (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every stochastic stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Write into existing output locations.
    #[arg(long)]
    force: bool,
    /// Output path; defaults to $SGCB_OUTPUT_ROOT/<subcommand>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides, `key=value`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus from the configured synthetic world.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Which corpus: train, eval-clean or eval-noisy.
        #[arg(long, default_value = "train")]
        kind: String,
    },
    /// Split a corpus into labeled and unlabeled parts.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the supervised CTC seed model on a labeled corpus.
    SeedTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labeled: PathBuf,
    },
    /// Build frame-level targets over labeled and unlabeled corpora.
    Targets {
        #[command(flatten)]
        common: Common,
        /// raw-kmeans, ctc-kmeans, latent-kmeans, phoneme-align,
        /// ground-truth, or model-predict.
        #[arg(long)]
        method: String,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        /// Seed CTC model, or a pre-trained model for latent-kmeans and
        /// model-predict.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Pre-training iteration the targets are for (seeds only).
        #[arg(long, default_value_t = 1)]
        iteration: usize,
    },
    /// Masked-prediction pre-training on saved targets.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long, default_value_t = 1)]
        iteration: usize,
    },
    /// CTC fine-tuning of a pre-trained model (or from scratch).
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint; omit to start from a fresh model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        labeled: PathBuf,
    },
    /// One round of pseudo-labeling and fine-tuning.
    Selftrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Pre-trained checkpoint the student starts from.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Run every stage end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Score a model (PER) or a target set (accuracy, purity, NMI).
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Corpora to score against; repeatable.
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
    },
    /// Print artifact headers without loading bulk data.
    Inspect {
        path: Option<PathBuf>,
        /// Print the default configuration.
        #[arg(long)]
        defaults: bool,
    },
}

/// Errors that are the caller's fault; they exit with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            PipelineConfig::parse(&text).map_err(config_error)?
        }
        None => PipelineConfig::default(),
    };
    let mut pairs = Vec::new();
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("override {o:?} is not key=value")))?;
        pairs.push((k.trim(), v.trim()));
    }
    config.apply_overrides(pairs).map_err(config_error)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate().map_err(config_error)?;
    Ok(config)
}

fn config_error(e: PipelineError) -> anyhow::Error {
    if e.is_config() {
        usage(e.to_string())
    } else {
        e.into()
    }
}

fn out_path(common: &Common, name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("sgcb-out"));
        root.join(name)
    })
}

/// Refuses to replace an existing file or non-empty directory unless forced.
fn claim(path: &Path, force: bool) -> Result<()> {
    if force || !path.exists() {
        return Ok(());
    }
    let occupied = !path.is_dir() || std::fs::read_dir(path)?.next().is_some();
    if occupied {
        bail!(usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn stage<T>(name: &str, r: std::result::Result<T, impl Into<anyhow::Error>>) -> Result<T> {
    r.map_err(|e| e.into().context(format!("stage {name} failed")))
}

fn load_model(path: &Path) -> Result<EncoderModel> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Generate { common, kind } => {
            let config = load_config(&common)?;
            let out = out_path(&common, "generate");
            claim(&out, common.force)?;
            let (label, n, noise) = match kind.as_str() {
                "train" => ("corpus", config.num_utterances, config.noise_scale),
                "eval-clean" => ("eval-clean", config.eval_utterances, config.eval_clean_noise),
                "eval-noisy" => ("eval-noisy", config.eval_utterances, config.eval_noisy_noise),
                other => bail!(usage(format!("unknown corpus kind {other:?}"))),
            };
            let spec = CorpusSpec::from_world(
                &config.world(),
                derive_seed(config.seed, "world"),
                derive_seed(config.seed, label),
                n,
                noise,
            );
            let corpus = stage("generate", generate_corpus(&spec))?;
            stage("generate", save_corpus(&corpus, &out))?;
            println!("{} utterances, {} frames -> {}", corpus.len(), corpus.total_frames(), out.display());
        }
        Command::Split { common, corpus } => {
            let config = load_config(&common)?;
            let out = out_path(&common, "split");
            claim(&out, common.force)?;
            let full = stage("split", load_corpus(&corpus))?;
            let (l, u) = stage(
                "split",
                split_corpus(&full, config.labeled_fraction, derive_seed(config.seed, "split")),
            )?;
            stage("split", save_corpus(&l, &out.join("labeled")))?;
            stage("split", save_corpus(&u, &out.join("unlabeled")))?;
            println!("{} labeled, {} unlabeled -> {}", l.len(), u.len(), out.display());
        }
        Command::SeedTrain { common, labeled } => {
            let config = load_config(&common)?;
            let out = out_path(&common, "seed.ckpt");
            claim(&out, common.force)?;
            let labeled = stage("seed-train", load_corpus(&labeled))?;
            let (model, log) = stage("seed-train", train_seed_model(&labeled.utterances, &config, config.seed))?;
            stage("seed-train", save_checkpoint(&model, &out))?;
            if let Some((a, b)) = log.endpoints(20) {
                println!("loss {a:.4} -> {b:.4}");
            }
            println!("checkpoint -> {}", out.display());
        }
        Command::Targets {
            common,
            method,
            labeled,
            unlabeled,
            model,
            iteration,
        } => {
            let config = load_config(&common)?;
            let out = out_path(&common, "targets");
            claim(&out, common.force)?;
            let labeled = stage("targets", load_corpus(&labeled))?;
            let unlabeled = stage("targets", load_corpus(&unlabeled))?;
            let model = model.as_deref().map(load_model).transpose()?;
            let outcome = if method == "model-predict" {
                let model = model.ok_or_else(|| usage("model-predict needs --model"))?;
                stage(
                    "targets",
                    predict_targets(&model, &labeled.utterances, &unlabeled.utterances, &config),
                )?
            } else {
                let m = CodebookMethod::parse(&method)
                    .filter(|m| *m != CodebookMethod::None)
                    .ok_or_else(|| usage(format!("unknown method {method:?}")))?;
                stage(
                    "targets",
                    build_targets(
                        m,
                        model.as_ref(),
                        &labeled.utterances,
                        &unlabeled.utterances,
                        &config,
                        derive_seed(config.seed, &format!("targets-{iteration}")),
                    ),
                )?
            };
            stage("targets", save_targets(&outcome.targets, &out))?;
            if let Some(cb) = &outcome.codebook {
                stage("targets", save_codebook(cb, &out.join("codebook")))?;
            }
            println!(
                "{} utterances, {} frames, vocab {} ({} skipped) -> {}",
                outcome.targets.len(),
                outcome.targets.total_frames(),
                outcome.targets.vocab_size,
                outcome.skipped.len(),
                out.display()
            );
        }
        Command::Pretrain {
            common,
            targets,
            labeled,
            unlabeled,
            iteration,
        } => {
            let config = load_config(&common)?;
            let out = out_path(&common, "pretrain.ckpt");
            claim(&out, common.force)?;
            let targets = stage("pretrain", load_targets(&targets))?;
            let labeled = stage("pretrain", load_corpus(&labeled))?.without_transcripts();
            let unlabeled = stage("pretrain", load_corpus(&unlabeled))?.without_transcripts();
            let utts: Vec<_> = labeled.utterances.iter().chain(&unlabeled.utterances).collect();
            let examples = pretrain_examples(&utts, &targets);
            let name = format!("pretrain-{iteration}");
            let outcome = stage(
                "pretrain",
                pretrain(&examples, targets.vocab_size, &config, derive_seed(config.seed, &name)),
            )?;
            stage("pretrain", save_checkpoint(&outcome.model, &out))?;
            if let Some((a, b)) = outcome.log.endpoints(20) {
                println!("loss {a:.4} -> {b:.4}");
            }
            if let Some(acc) = outcome.heldout_masked_accuracy {
                println!("held-out masked accuracy {acc:.4} (chance {:.4})", 1.0 / targets.vocab_size as f64);
            }
            println!("checkpoint -> {}", out.display());
        }
        Command::Finetune { common, model, labeled } => {
            let config = load_config(&common)?;
            let out = out_path(&common, "finetune.ckpt");
            claim(&out, common.force)?;
            let init = student(&config, model.as_deref())?;
            let labeled = stage("finetune", load_corpus(&labeled))?;
            let data = transcribed(&labeled)?;
            let (model, log) = stage(
                "finetune",
                finetune(&init, &data, &config, &config.finetune_schedule(), derive_seed(config.seed, "finetune")),
            )?;
            stage("finetune", save_checkpoint(&model, &out))?;
            if let Some((a, b)) = log.endpoints(20) {
                println!("loss {a:.4} -> {b:.4}");
            }
            println!("checkpoint -> {}", out.display());
        }
        Command::Selftrain {
            common,
            teacher,
            model,
            labeled,
            unlabeled,
            round,
        } => {
            let config = load_config(&common)?;
            let out = out_path(&common, "selftrain.ckpt");
            claim(&out, common.force)?;
            let teacher = load_model(&teacher)?;
            let init = if config.selftrain_fresh_student {
                student(&config, None)?
            } else {
                student(&config, model.as_deref())?
            };
            let labeled = stage("selftrain", load_corpus(&labeled))?;
            let unlabeled = stage("selftrain", load_corpus(&unlabeled))?;
            let outcome = stage(
                "selftrain",
                self_train_round(
                    &teacher,
                    &init,
                    &labeled.utterances,
                    &unlabeled.utterances,
                    &config,
                    derive_seed(config.seed, &format!("selftrain-{round}")),
                ),
            )?;
            stage("selftrain", save_checkpoint(&outcome.model, &out))?;
            println!(
                "{} pseudo-transcripts; checkpoint -> {}",
                outcome.pseudo_transcripts.len(),
                out.display()
            );
        }
        Command::Pipeline { common } => {
            let config = load_config(&common)?;
            let out = out_path(&common, "pipeline");
            let report = run_pipeline(&config, &out, RunOptions { force: common.force }).map_err(|e| match e {
                PipelineError::Artifact(io::ArtifactError::Exists { path }) => {
                    usage(format!("{} exists; pass --force to overwrite", path.display()))
                }
                e if e.is_config() => usage(e.to_string()),
                e => e.into(),
            })?;
            print!("{}", report.to_text());
            let json = io::read_file(&out.join("report.json"))?;
            println!("report sha256 {}", io::sha256_hex(&json));
        }
        Command::Eval { model, targets, corpus } => eval(model, targets, &corpus)?,
        Command::Inspect { path, defaults } => {
            if defaults {
                print!("{}", PipelineConfig::default().to_text());
            }
            match path {
                Some(p) => inspect(&p)?,
                None if !defaults => bail!(usage("inspect needs a path or --defaults")),
                None => {}
            }
        }
    }
    Ok(())
}

fn student(config: &PipelineConfig, pretrained: Option<&Path>) -> Result<EncoderModel> {
    match pretrained {
        Some(p) => {
            let m = load_model(p)?;
            Ok(if m.head == HeadKind::Ctc { m } else { ctc_student(&m, config, config.seed) })
        }
        None => Ok(EncoderModel::new(
            config.encoder_config(config.phoneme_inventory_size + 1),
            HeadKind::Ctc,
            derive_seed(config.seed, "scratch-init"),
        )?),
    }
}

fn transcribed(corpus: &sgcb_core::Corpus) -> Result<Vec<(&ndarray::Array2<f32>, &[u16])>> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            u.transcript
                .as_deref()
                .map(|t| (&u.features, t))
                .ok_or_else(|| usage(format!("utterance {} has no transcript", u.id)))
        })
        .collect()
}

fn eval(model: Option<PathBuf>, targets: Option<PathBuf>, corpora: &[PathBuf]) -> Result<()> {
    if model.is_none() && targets.is_none() {
        bail!(usage("eval needs --model or --targets"));
    }
    if let Some(m) = model {
        let model = load_model(&m)?;
        println!("{:<32} {:>6} {:>7} {:>5} {:>5} {:>5} {:>8}", "corpus", "utts", "ref", "sub", "ins", "del", "PER");
        for c in corpora {
            let corpus = stage("eval", load_corpus(c))?;
            let e = stage("eval", phoneme_error_rate(&model, &corpus.utterances))?;
            println!(
                "{:<32} {:>6} {:>7} {:>5} {:>5} {:>5} {:>8.4}",
                c.display().to_string(),
                corpus.len(),
                e.reference_length,
                e.substitutions,
                e.insertions,
                e.deletions,
                e.rate
            );
        }
    }
    if let Some(t) = targets {
        let set = stage("eval", load_targets(&t))?;
        let mut utts = Vec::new();
        let mut factor = None;
        for c in corpora {
            utts.extend(stage("eval", load_corpus(c))?.utterances);
        }
        // The encoder rate is recovered from frame counts.
        for e in &set.entries {
            if let Some(u) = utts.iter().find(|u| u.id == e.id) {
                if !e.labels.is_empty() {
                    factor = Some(u.num_frames() / e.labels.len());
                    break;
                }
            }
        }
        let factor = factor.ok_or_else(|| usage("targets share no utterances with the corpora"))?;
        let known: std::collections::HashSet<&str> = set.entries.iter().map(|e| e.id.as_str()).collect();
        let covered: Vec<_> = utts.iter().filter(|u| known.contains(u.id.as_str())).collect();
        let truth = stage("eval", ground_truth_targets(covered.iter().copied(), factor, usize::MAX))?;
        let truth_map = truth.entries.iter().map(|e| (e.id.clone(), e.labels.clone())).collect();
        let mut subset = set.clone();
        subset.entries.retain(|e| truth.get(&e.id).is_some());
        let acc = stage("eval", frame_accuracy(&subset, &truth_map))?;
        let labels: Vec<u16> = subset.entries.iter().flat_map(|e| e.labels.clone()).collect();
        let phones: Vec<u16> = subset
            .entries
            .iter()
            .flat_map(|e| truth.get(&e.id).unwrap().to_vec())
            .collect();
        let cm = stage("eval", cluster_metrics(&labels, &phones))?;
        println!("{:<16} {:>10} {:>10} {:>10} {:>10}", "provenance", "frames", "accuracy", "purity", "nmi");
        println!(
            "{:<16} {:>10} {:>10.4} {:>10.4} {:>10.4}",
            set.provenance.as_str(),
            labels.len(),
            acc,
            cm.purity,
            cm.nmi
        );
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        if path.join("meta.json").exists() {
            let meta = read_corpus_meta(path)?;
            println!("{}", serde_json::to_string_pretty(&meta)?);
        } else if path.join("targets.tsv").exists() {
            let (vocab, prov, n) = read_targets_header(path)?;
            println!("targets: {n} utterances, vocab_size {vocab}, provenance {}", prov.as_str());
            if path.join("codebook").join("codebook.txt").exists() {
                inspect(&path.join("codebook"))?;
            }
        } else if path.join("codebook.txt").exists() {
            print!("{}", io::read_text(&path.join("codebook.txt"))?);
        } else if path.join("report.json").exists() {
            print!("{}", io::read_text(&path.join("report.txt"))?);
        } else {
            bail!(usage(format!("{} is not a recognized artifact", path.display())));
        }
    } else {
        let (config, head) = read_checkpoint_header(path).with_context(|| format!("reading {}", path.display()))?;
        println!("head = {}", head.as_str());
        print!("{}", serde_json::to_string_pretty(&config)?);
        println!();
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
