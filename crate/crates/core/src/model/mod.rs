//! Decoder-only transformer with an explicit edge-level computation graph.
//!
//! Nodes are the embedding output, every attention head, every MLP and the
//! unembedding. Each head reads its query, key and value inputs through
//! separate edges, so the graph can be patched per channel.

mod config;
mod decode;
mod forward;
mod graph;
mod params;

pub use config::ModelConfig;
pub use decode::{sample_batch, sample_token, sample_with, top_k_distribution, BatchDecoder, Decoder, SamplingConfig};
pub use forward::{Activations, EdgePatch, Replacement};
pub(crate) use forward::RunOptions;
pub use graph::{Channel, ComputationGraph, EdgeId, InputSlot, NodeId};
pub use params::{Model, CHECKPOINT_VERSION};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} exceeds the context window ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("edge {0} is not in the computation graph")]
    UnknownEdge(String),
    #[error("replacement for {edge} has size {got}, expected {expected}")]
    ReplacementShape { edge: String, expected: usize, got: usize },
    #[error("missing input for {0}")]
    MissingInput(String),
    #[error("cannot parse node name {0:?}")]
    ParseNode(String),
    #[error("cannot parse edge name {0:?}")]
    ParseEdge(String),
    #[error("invalid sampling settings: {0}")]
    InvalidSampling(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[cfg(test)]
mod tests;
