//! Temporal splits, imbalanced-classification metrics and the comparison harness.

mod baseline;
mod compare;
mod metrics;
mod split;

pub use baseline::{fit_logistic, logistic_baseline, LogisticConfig, LogisticModel};
pub use compare::{
    aggregate, prepare_dataset, run_comparison, write_aggregate, write_results, AggregateRow, Cell,
    Comparison, AGGREGATE_HEADER, BASELINE_CONFIG, RESULTS_HEADER,
};
pub use metrics::{
    alert_tier, auprc, auroc, bootstrap_ci, f1_mcc, metric_report, percentile, AlertTier,
    Confusion, Metric, MetricReport, BOOTSTRAP_RESAMPLES, DEFAULT_THRESHOLD,
};
pub use split::SplitSpec;
