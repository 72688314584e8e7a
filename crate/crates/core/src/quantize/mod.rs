//! K-means codebooks over raw frames or encoder hidden states.

mod codebook;
mod features;
mod kmeans;

use thiserror::Error;

use crate::io::ArtifactError;
use crate::nn::NnError;

pub use codebook::{load_codebook, save_codebook, Codebook, CodebookSource, FeatureKind};
pub use features::{extract_layer_features, flatten_frames, stack_frames};
pub use kmeans::{kmeans_assign, kmeans_fit, squared_distance, KmeansConfig};

#[derive(Debug, Error)]
pub enum QuantizeError {
    #[error("layer {layer} out of range for an encoder with {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("k-means needs at least K={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("feature dimension {got} does not match codebook dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid k-means config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

impl QuantizeError {
    pub fn is_format(&self) -> bool {
        matches!(self, QuantizeError::Artifact(e) if e.is_format())
    }
}
