//! Supervision-guided codebooks and masked-prediction pre-training on
//! synthetic phoneme corpora.

pub mod align;
pub mod corpus;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod quantize;

pub use align::{AlignError, BlankPolicy, Provenance, TargetSet};
pub use corpus::{Corpus, CorpusError, CorpusSpec, Utterance};
pub use nn::{EncoderConfig, EncoderModel, HeadKind, NnError};
