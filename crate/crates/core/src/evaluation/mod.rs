//! Downstream metrics and evaluation protocols.

mod metrics;
mod protocol;
mod report;
mod retrieval;
mod store;
mod zeroshot;

pub use metrics::{
    binary_auroc, binary_average_precision, confidence_interval, macro_auroc, macro_average_precision, one_hot,
    per_class_auroc, per_class_average_precision, two_sided_t_test, ConfidenceInterval,
};
pub use protocol::{
    embed_images, embed_texts, evaluate_protocol, fewshot_reports, fewshot_runs, finetune_evaluation, retrieval_suite,
    zero_shot_scores,
    zeroshot_on_downstream_test, EvalConfig, EvalDataset, EvalItem, FewShotRun, Protocol, RetrievalSuite,
};
pub use report::{append_reports, read_reports, MetricReport};
pub use retrieval::{recall_at_k, RetrievalResult, DEFAULT_KS};
pub use store::{EmbeddingStore, RowMeta, Side, STORE_FORMAT_VERSION};
pub use zeroshot::{argmax_first, zero_shot_classify, ZeroShotPrediction};
