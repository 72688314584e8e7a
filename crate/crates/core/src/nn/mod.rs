//! Convolutional frontend + transformer encoder with a bucketed relative
//! position bias, trained by hand-written backpropagation.

mod bucket;
mod checkpoint;
mod encoder;
mod gradcheck;
mod loss;
mod mask;
mod optim;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::CtcError;

pub use bucket::{bucket_table, relative_bucket};
pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint};
pub use encoder::{EncoderOutput, ForwardCache, ForwardOptions};
pub use gradcheck::{gradient_check, FlatParams, GradCheckReport};
pub use loss::{
    finetune_loss, log_softmax_rows, masked_prediction_loss, masked_prediction_loss_weighted,
    softmax_rows,
};
pub use mask::{sample_mask, sample_mask_with, MaskSpec};
pub use optim::{AdamW, AdamWConfig, Schedule, ScheduleKind};
pub use params::{Parameters, FRONTEND_PREFIX};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("mask is empty; masked-prediction loss is undefined")]
    EmptyMask,
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("optimizer step {step} out of range for a {total}-step schedule")]
    StepOutOfRange { step: usize, total: usize },
    #[error("target label {label} out of range for vocabulary of {vocab}")]
    LabelOutOfRange { label: u16, vocab: usize },
    #[error("tensor {tensor} holds values that are not exactly representable as f32")]
    NotF32Representable { tensor: String },
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Artifact(#[from] crate::io::ArtifactError),
}

impl NnError {
    pub fn is_format(&self) -> bool {
        matches!(self, NnError::Artifact(e) if e.is_format())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Feature dimension D of the input frames.
    pub input_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Cumulative stride of the frontend; `T' = floor(T / s)`.
    pub downsample_factor: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
    /// Number of output logits.
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 8,
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            downsample_factor: 2,
            num_buckets: 32,
            max_distance: 128,
            vocab_size: 13,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        if self.input_dim == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad("hidden_dim must be divisible by num_heads");
        }
        if self.num_buckets < 2 {
            return bad("num_buckets must be >= 2");
        }
        if self.max_distance == 0 {
            return bad("max_distance must be > 0");
        }
        if self.downsample_factor == 0 {
            return bad("downsample_factor must be >= 1");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Strides of the frontend convolutions: the prime factors of the
    /// downsample factor, or a single stride-1 layer.
    pub fn frontend_strides(&self) -> Vec<usize> {
        let mut s = self.downsample_factor;
        if s <= 1 {
            return vec![1];
        }
        let mut out = Vec::new();
        let mut p = 2;
        while s > 1 {
            while s % p == 0 {
                out.push(p);
                s /= p;
            }
            p += 1;
        }
        out
    }

    pub fn output_frames(&self, input_frames: usize) -> usize {
        input_frames / self.downsample_factor
    }

    pub(crate) fn to_text(&self, head: HeadKind) -> String {
        format!(
            "input_dim={}\nnum_layers={}\nhidden_dim={}\nnum_heads={}\nffn_dim={}\n\
             downsample_factor={}\nnum_buckets={}\nmax_distance={}\nvocab_size={}\n\
             dropout={}\nhead={}\n",
            self.input_dim,
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.ffn_dim,
            self.downsample_factor,
            self.num_buckets,
            self.max_distance,
            self.vocab_size,
            self.dropout,
            head.as_str()
        )
    }
}

/// What the output projection predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Blank (index 0) plus phoneme labels `1..=P`; trained with CTC.
    Ctc,
    /// Discrete frame targets `0..V`; trained with masked prediction.
    Targets,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Ctc => "ctc",
            HeadKind::Targets => "targets",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ctc" => Some(HeadKind::Ctc),
            "targets" => Some(HeadKind::Targets),
            _ => None,
        }
    }
}

/// Encoder parameters together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub head: HeadKind,
    pub params: Parameters,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, head: HeadKind, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Ok(EncoderModel {
            config,
            head,
            params,
        })
    }

    /// Swaps the output projection for a freshly initialized one.
    pub fn with_new_head(&self, head: HeadKind, vocab_size: usize, seed: u64) -> Self {
        let mut config = self.config.clone();
        config.vocab_size = vocab_size;
        let mut params = self.params.clone();
        params.reset_head(&config, seed);
        EncoderModel {
            config,
            head,
            params,
        }
    }

    /// Hash of all parameter bits, in canonical tensor order.
    pub fn param_hash(&self) -> String {
        self.params.hash()
    }
}
