//! Explanation outputs: temporal attention audit trails, permutation feature
//! importance, and the per institution-quarter risk report.

mod attribution;
mod importance;
mod report;

pub use attribution::{extract_temporal_attention, write_attributions, TemporalAttribution, ATTRIBUTION_HEADER};
pub use importance::{
    permutation_importance, write_importance, FeatureImportance, ImportanceEntry, DEFAULT_REPEATS,
    IMPORTANCE_HEADER,
};
pub use report::{risk_report, ReportRow, RiskReport, TierCount, REPORT_BETA_SLOTS};
