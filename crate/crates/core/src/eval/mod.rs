//! Evaluation: voxel-wise overlap metrics, agreement statistics for paired
//! counts, stratified fold assignment and report aggregation.

mod confusion;
mod kfold;
mod report;
mod stats;

pub use confusion::{confusion, confusion_any_foreground, dsc_sen_ppv, ConfusionCounts, OverlapMetrics};
pub use kfold::{median_split, stratified_kfold, stratum_key, FoldAssignment};
pub use report::{
    aggregate_report, case_metrics, summarize, CaseMetrics, ClassSel, ClusterSummary, GroupReport, Grouping,
    MetricsReport, Summary,
};
pub use stats::{
    agreement, bland_altman, ccc, lin_ccc, pearson, ranks, spearman, AgreementStats, BlandAltman, Bootstrap,
    CccEstimate,
};
