//! Evaluation metrics for multi-label classification.
//!
//! Multi-label recordings are spread over classes with weight
//! `1 / max(1, |true ∪ pred|)`, both in the per-class counts and in the
//! challenge confusion matrix.

mod auc;
mod challenge;
mod counts;
mod report;

pub use auc::{class_auc, macro_auc, AucReport};
pub use challenge::{challenge_confusion, challenge_score, weighted_sum, ChallengeScore, WeightMatrix};
pub use counts::{fbeta, gbeta, per_class_counts, ConfusionCounts, BETA};
pub use report::{binarize, ClassReport, EvalReport, Predictions, DEFAULT_THRESHOLD};
