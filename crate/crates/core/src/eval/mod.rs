//! Logloss, AUC, RelaImpr, and stage-grouped reports.

mod metrics;
mod report;

pub use metrics::{auc, logloss, rela_impr};
pub use report::{combine_seeds, evaluate_suite, MetricRow, StageReport, StageRow};
