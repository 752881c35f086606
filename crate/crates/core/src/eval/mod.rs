//! Linear probing, representation variance and ablation grids.

mod ablation;
mod probe;
mod variance;

pub use ablation::{
    ablation_report, load_splits, localization_for, mean_std, needs_localization, probe, probe_domain, run_cell, split_dirs,
    AblationReport, Cell, CellOptions, SummaryRow, REPORT_HEADER, SUMMARY_HEADER,
};
pub use probe::{linear_probe, train_probe, Features, ProbeConfig, ProbeResult};
pub use variance::{embedding_variance, variance_csv, view_variance, VarianceReport, ViewSpec, VARIANCE_HEADER};
