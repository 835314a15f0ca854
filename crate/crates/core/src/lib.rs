//! Desk-scale decoder-only causal transformer with hierarchical summary-token
//! rewiring, plus numerical tooling for studying over-squashing.
//!
//! The crate is organised around the pipeline an embedding request follows:
//!
//! - [`partition`] segments text into sentences, groups them into blocks and
//!   lays out the augmented sequence with `<B-PST>`/`<PST>` placeholders.
//! - [`model`] runs the single-head pre-LN causal transformer, capturing
//!   attention and every intermediate hidden state.
//! - [`rewire`] copies block-end states into the placeholders between layers.
//! - [`sensitivity`] builds mixing matrices from captured attention and checks
//!   last-token and mean-pooled Jacobian bounds by finite differences.
//! - [`eval`] holds retrieval scoring, echo duplication and long-input probes.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod partition;
pub mod rewire;
pub mod seed;
pub mod sensitivity;
pub mod tokens;

pub use error::{Error, ErrorKind, Result};
pub use exec::Execution;
pub use model::{
    embed_last, embed_mean, forward, forward_embeddings, init_weights, AttentionTrace,
    ForwardOptions, ForwardOutput, HiddenStates, LayerRange, ModelConfig, ModelWeights,
    PositionalScheme, RegionMask,
};
pub use partition::{augment, build_partition, build_partition_every_n, segment_sentences};
pub use rewire::{
    embed_document, embed_documents, DocumentConfig, Grouping, Method, Readout, RewirePlan,
};
