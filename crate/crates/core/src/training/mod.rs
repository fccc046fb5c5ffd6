//! Pretraining and fine-tuning loops.

mod batch;
mod checkpoint;
mod finetune;
mod pretrain;
mod schedule;

pub use batch::{compose_batch, pairing_text, Batch, BatchSource, Sample};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_FORMAT_VERSION};
pub use finetune::{
    encoder_digest, fewshot_sample, finetune, Classifier, FewShot, FinetuneConfig, FinetuneEpoch, FinetuneMode,
    FinetuneOutcome, LabeledItem, LabeledSet, CLASSIFIER_CHECKPOINT, CLASSIFIER_HEAD, HEAD_PREFIX,
};
pub use pretrain::{
    batch_loss, pretrain, read_step_log, read_val_log, training_texts, validation_loss, BatchLoss, EpochRecord,
    PretrainConfig, PretrainOutcome, StepRecord, BEST_CHECKPOINT, TRAIN_LOG, VAL_LOG,
};
pub use schedule::{lr_at, Schedule};
