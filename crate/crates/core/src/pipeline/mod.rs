//! Config-driven orchestration: data, training, compression, evaluation and
//! report tables, plus the loss sweep.

mod config;
mod report;
mod run;
mod sweep;

pub use config::{DataSection, PipelineConfig, PruneSection, SweepSection};
pub use report::{
    format_pct, reference_table, relative_change_pct, report_csv, report_table, ReportRow, REFERENCE_ROWS,
};
pub use run::{prepare_data, run_pipeline, PipelineOutcome, PreparedData, STAGE_MANIFEST};
pub use sweep::{loss_sweep, SweepReport, SweepRow, TAIL_EPOCHS};
