//! Experiment pipeline for the SEViT toolkit: dataset ingestion, run
//! configuration, stage orchestration under `runs/<id>/`, CSV metrics and
//! SVG plots.

pub mod config;
pub mod dataset;
pub mod plot;
mod report;
pub mod run;

pub use config::{load_config, RunConfig, Seeds};
pub use dataset::{ingest_dataset, write_synthetic, DatasetManifest};
pub use run::{Run, RunRecord, Stage, StageOptions, StageRecord, StageStatus};
