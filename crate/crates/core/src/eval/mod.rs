//! Cross-validation, metrics, bootstrap intervals and report tables.

pub mod bootstrap;
pub mod folds;
pub mod metrics;
pub mod report;
pub mod suite;

use thiserror::Error;

pub use bootstrap::bootstrap_ci;
pub use folds::{make_folds, FoldPlan};
pub use report::write_report;
pub use suite::{run_ablation_suite, split_validation, EvalReport, SuiteConfig, SuiteError};
pub use metrics::{auc, brute_force_auc, f1_scores, macro_auc, multilabel_f1, F1Scores, MultiLabelF1};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("only one class present")]
    SingleClass,
    #[error("too few examples: {0}")]
    TooFewExamples(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}
