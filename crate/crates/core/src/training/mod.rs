//! Optimization: AdamW with warmup and cosine decay, the pre-training loop
//! over the full objective, retrieval and question-answering fine-tuning, and
//! checkpointed training state for exact resumption.

mod config;
mod finetune;
mod forward;
mod optim;
mod state;
mod trainer;

pub use config::{Objective, Precision, TrainConfig};
pub use finetune::{
    check_answers, ensure_vqa_head, finetune_retrieval, finetune_vqa, predict_vqa, vqa_head_specs,
    vqa_scores, RETRIEVAL_FROZEN,
};
pub use forward::{pretrain_loss, pretrain_terms, PretrainTerms};
pub use optim::{warmup_cosine, AdamW};
pub use state::{
    epoch_order, load_checkpoint, load_model, read_meta, save_checkpoint, CheckpointMeta,
};
pub use trainer::{load_clips, pretrain, TrainOutcome, LAST_CHECKPOINT, METRICS_FILE};
