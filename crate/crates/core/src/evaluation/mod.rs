//! Retrieval metrics, similarity diagnostics, VQA accuracy and counters for
//! the cost of two-tower versus cross-encoder retrieval.

mod checks;
mod efficiency;
mod metrics;
mod report;

pub use checks::{
    gradient_checks, loss_gradient_checks, micro_batch, model_gradient_check, oracle_check,
    random_embedding_batch, Component, GradRow, OracleRow, GRAD_STEP, LOSS_GRAD_TOL,
    MODEL_GRAD_TOL, ORACLE_TOL,
};
pub use efficiency::{
    efficiency_probe, measure_paths, EfficiencyReport, InstrumentedModel, PathCounts,
};
pub use metrics::{
    ranks, retrieval_metrics, similarity_diagnostics, similarity_matrix, vqa_accuracy,
    RetrievalMetrics, SimilarityMatrix, EMBED_NORM_TOL,
};
pub use report::{append_report, embed_records, evaluate_retrieval, RetrievalReport, VqaReport};
