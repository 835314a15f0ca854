//! Retrieval scoring and embedding probes.

mod corpus;
mod echo;
mod embfile;
mod metrics;
mod probe;

pub use corpus::{read_jsonl, write_jsonl, Corpus, Document, Judgment, Query};
pub use echo::{
    area_mask, echo_duplicate, echo_embed, region_mask_experiment, EchoArea, EchoEmbeddings,
    EchoSequence,
};
pub use embfile::{EmbeddingHeader, EmbeddingMatrix};
pub use metrics::{
    cosine, cosine_rank, evaluate_retrieval, ndcg_at_k, QueryMetric, Ranked, RankingResult,
    RetrievalMetrics,
};
pub use probe::{group_cosine_stats, long_concat_probe, ProbeConfig, ProbeLength, ReadoutStats};
