//! CTC machinery and frame-level target generation.

mod ctc;
mod targets;

use thiserror::Error;

use crate::io::ArtifactError;
use crate::nn::NnError;

pub use ctc::{
    ctc_forced_align, ctc_forward_backward, ctc_greedy_decode, ctc_trellis, ctc_viterbi,
    expand_target, required_frames, CtcError, CtcOutput, CtcTrellis, BLANK,
};
pub use targets::{
    downsample_labels, frame_targets_from_model, ground_truth_targets, load_targets,
    read_targets_header, resolve_blanks, save_targets, BlankPolicy, Provenance, TargetEntry,
    TargetMode, TargetReport, TargetSet,
};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("utterance {0} has no transcript")]
    MissingTranscript(String),
    #[error("utterance {0} has no ground-truth alignment")]
    MissingTruth(String),
    #[error("{0}")]
    WrongHead(&'static str),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

impl AlignError {
    pub fn is_format(&self) -> bool {
        matches!(self, AlignError::Artifact(e) if e.is_format())
    }
}
