//! Experiment plumbing: TOML run configs, the binary checkpoint format,
//! metrics/summary artifacts, PGM/PPM export, run drivers, and canned
//! recipe grids.

pub mod checkpoint;
pub mod config;
pub mod image;
pub mod metrics;
pub mod recipes;
pub mod runs;

pub use checkpoint::{
    load_checkpoint, load_model, load_theta, save_checkpoint, save_model, save_theta,
    CheckpointMeta, ModelMeta, MAGIC, VERSION,
};
pub use config::{
    default_toml, DatasetSpec, DdsSection, DenoiserSpec, EvalSection, ExperimentKind,
    ExportSection, OracleSection, Precision, RunConfig, ScheduleConfig, TrainSection,
};
pub use image::export_image;
pub use metrics::{
    write_json, write_loss_csv, write_metrics_csv, write_table_csv, OracleReport,
    METRICS_HEADER,
};
pub use recipes::{recipe_suite, RecipeOutcome, RECIPES};
pub use runs::{build_dataset, build_denoiser, execute, oracle_reports, preset_sandbox, RunOutcome};
