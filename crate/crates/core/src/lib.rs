//! Prototype-driven online curation of paired image/text embeddings.
//!
//! The engine keeps a bank of evolving prototypes in a unified embedding
//! space, scores each super-batch by distance to the nearest prototype,
//! keeps the distant tail, under-samples each prototype cluster with
//! farthest point sampling, and refreshes the prototypes from the selected
//! mini-batch through an entropic transport plan and an EMA. A linear
//! contrastive head, zero-shot metrics, density statistics and a synthetic
//! long-tailed corpus generator make the behaviour measurable end to end.

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod curation;
pub mod embedding;
pub mod error;
pub mod fmt;
pub mod fps;
pub mod metrics;
pub mod pipeline;
pub mod prototypes;
pub mod stats;
pub mod synth;
pub mod trainer;
pub mod transport;

pub use corpus::{decode_corpus, encode_corpus, read_corpus, write_corpus, Corpus, CorpusHeader, CorpusReader};
pub use embedding::{
    l2_normalize, pairwise_distance, unify, CurationSpace, EmbeddingPair, LabelMask, UnifiedEmbedding,
};
pub use error::{Error, Result};
pub use prototypes::{init_kmeans, nearest_prototype, sinkhorn_plan, update_prototypes, PrototypeBank};
pub use transport::{sinkhorn, SinkhornParams, TransportPlan};
pub use curation::{
    curate_superbatch, run_curation, score_superbatch, select_distant, trim_outliers, CurationConfig, CurationMode,
    CurationOutcome, CuratedSelection, Reason, SelectionEntry,
};
pub use fps::{fps_select, FpsPoint};
pub use trainer::{
    info_nce, info_nce_grad, optimizer_step, train_head, AdamWConfig, OptimizerState, ProjectionHead, TrainConfig,
};
pub use metrics::{
    auprc, auroc, evaluate, macro_average, recall_at_1, zero_shot_prob, MetricReport, PromptPair, PromptSet,
    RetrievalDirection,
};
pub use analysis::{
    analyze_corpus, ecdf, knn_mean_distance, label_histogram, low_density_proportion, pca2, AnalysisBundle,
    AnalysisConfig, DensityProfile,
};
pub use stats::{paired_t, run_summary, welch_t, RunSummary, TestResult};
pub use synth::{generate_corpus, generate_prompts, MixtureSpec};
pub use config::{parse_config, EngineConfig};
