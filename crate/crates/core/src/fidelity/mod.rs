//! Distributional and correlational fidelity probes over prediction windows.
//!
//! Marginals use the two-sample KS statistic for numeric features and total
//! variation for categorical ones. Cross-feature structure is summarised by
//! an association matrix (Pearson, correlation ratio, Cramér's V) whose
//! tiles may be UNDEFINED when a feature is degenerate in the window.

mod association;
mod marginal;
mod report;

pub use association::{
    association, correlation_ratio, cramers_v, pearson, Association, Column, Measure,
};
pub use marginal::{
    categorical_histogram, ks_statistic, level_counts, numeric_histogram, tv_distance,
    tv_from_frequencies, Histogram, MarginalKind, MarginalMetric, NUMERIC_BINS,
};
pub use report::{
    association_matrix, correlation_gap, fidelity_report, AssociationEntry, AssociationMatrix,
    FidelityReport, GapSummary, ReportMeta,
};
