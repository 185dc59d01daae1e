//! Run configuration, experiment orchestration, statistics and result
//! persistence.

mod config;
mod report;
mod runner;
mod stats;

pub use config::{AblationAxes, BackboneSource, IdxSource, RunConfig, SyntheticSuite};
pub use report::{
    accuracy_digest, append_csv, read_csv, CheckpointSummary, CsvRow, DatasetReport, EpisodeFailure,
    ParamSummary, RunReport, Summary, CSV_COLUMNS, REPORT_FORMAT_VERSION,
};
pub use runner::{
    ablation_grid, episode_seed, grid_configs, load_datasets, prepare, pretrain_backbone, run_episode, run_experiment, run_pool, run_prepared,
    Prepared, MAX_FAILURE_FRACTION,
};
pub use stats::{aggregate_rank, ci95, mean, sample_std};
