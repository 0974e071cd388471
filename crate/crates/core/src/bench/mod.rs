//! Experiment configs, execution and result aggregation.

pub mod config;
pub mod results;
pub mod run;

pub use config::{classification_budgets, decade_budgets, DatasetSpec, Experiment, ExperimentConfig, ReconstructionSpec, Task};
pub use results::{
    aggregate, load_results, provenance_line, read_results, report, verdicts, write_cells_csv, write_histogram_csv,
    CellSummary, Metric, Report, ReportOptions, ResultRow, ResultWriter, Verdict, VERSION,
};
pub use run::{build_family, load_labeled, mask_histogram, ramp_scene, run, run_file, RunOutput, RunSummary};
