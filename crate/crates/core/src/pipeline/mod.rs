//! End-to-end orchestration: seed model, targets, masked pre-training,
//! fine-tuning and self-training, with persisted, hash-checked artifacts.

mod config;
mod report;
mod run;
mod store;
mod targets;
mod train;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::AlignError;
use crate::corpus::CorpusError;
use crate::eval::EvalError;
use crate::io::ArtifactError;
use crate::nn::NnError;
use crate::quantize::QuantizeError;

pub use config::{CodebookMethod, PipelineConfig};
pub use report::{ArtifactRecord, PipelineReport, StageReport};
pub use run::{
    compare_methods, run_pipeline, Arm, Comparison, CorpusSet, RunOptions, SeedArtifacts,
};
pub use store::Workspace;
pub use targets::{build_targets, predict_targets, pseudo_transcript_error, target_quality, TargetOutcome};
pub use train::{
    ctc_student, finetune, greedy_transcripts, phoneme_error_rate, pretrain, pretrain_examples,
    reference_transcript, self_train_round, train_ctc, train_seed_model, PretrainExample,
    PretrainOutcome, SelfTrainOutcome, TrainLog,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged in {stage} at step {step}")]
    Diverged { stage: String, step: usize },
    #[error("utterance {0} has no transcript")]
    MissingTranscript(String),
    #[error("artifact {name} changed on disk: expected {expected}, found {actual}")]
    HashMismatch {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("no artifact named {0} has been produced")]
    MissingArtifact(String),
    #[error("stage {stage} failed: {source}")]
    StageFailed {
        stage: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

impl PipelineError {
    /// Name of the failing stage, if the error came from one.
    pub fn stage(&self) -> Option<&str> {
        match self {
            PipelineError::StageFailed { stage, .. } => Some(stage),
            _ => None,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::UnknownKey(_) | PipelineError::Config(_))
    }
}

/// Independent seed for a named stochastic step.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
