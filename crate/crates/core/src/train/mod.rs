//! Pretraining, grafting, finetuning and checkpoint IO.

mod checkpoint;
mod config;
mod data;
mod finetune;
mod graft;
mod optimizer;
mod pretrain;

pub use checkpoint::{
    checkpoint_dir, load_checkpoint, read_manifest, save_checkpoint, Manifest, TensorEntry, MANIFEST_FILE, MANIFEST_VERSION,
    PARAMS_FILE,
};
pub use config::{warmup_lr, ModelVariant, TrainConfig};
pub use data::{eval_batches, sample_mlm_batch, sample_windows, Corpus, EVAL_EVERY};
pub use finetune::{accuracy, dev_split, example_batch, finetune, usage_by_class, FinetuneOutcome, LabeledExample};
pub use graft::init_from_pretrained;
pub use optimizer::{Optimizer, TouchedRows};
pub use pretrain::{
    evaluate, heldout_batches, pretrain, EvalRecord, Evaluation, PretrainOutcome, RunHooks, CHECKPOINTS_DIR, MEMORY_PARAM,
    METRICS_FILE,
};
