//! Toy three-encoder model: a space-time patch transformer for video, a
//! bidirectional transformer for text, and a fusion transformer over their
//! concatenated token sequences. Each has a projection head into a shared
//! unit-norm embedding space.

mod checkpoint;
mod config;
mod layers;
mod model;
mod params;
pub mod text;

pub use checkpoint::{write_atomic, CheckpointFile, StoredTensor, FORMAT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use model::{CloverModel, EmbeddingSequence, FusedOut, FusedSequence, SeqOut, VideoClip};
pub use params::{model_param_specs, Graph, Init, ParamStore};
pub use text::{TokenizedText, Vocab};

pub(crate) use layers::linear;
