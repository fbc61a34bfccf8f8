//! Scoring disassembler output against ground truth and aggregating the
//! scores into weighted, grouped metrics.

mod metrics;
mod predictions;
mod report;
mod score;

pub use metrics::{
    cross_group_report, group_weights, harmonic_mean, summarize_group, CrossGroupReport, GroupKey, GroupSummary,
    Metric, MetricsError, ToolRow, Weights,
};
pub use predictions::{normalize_output, Claim, PredictionError, PredictionSet, ADAPTERS};
pub use report::{
    partition_reports, read_scores_csv, render_table, summarize_scores, write_scores_csv, write_summary_csv,
    write_wins_csv, ReportError, ScoreRow,
};
pub use score::{
    count_nop_false_positives, linear_sweep_check, score, score_detailed, BinaryScore, ClaimOutcome, ClaimScope,
    DetailedScore, RegionMode, ScoreError, ScoreOptions,
};
