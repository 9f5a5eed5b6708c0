//! Std front end of the pipeline: dataset and checkpoint files, reports,
//! configuration, the teleoperation service and the `bucketrl` CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod json;
pub mod report;
pub mod teleop;

pub use checkpoint::{load_agent, load_encoder, load_encoder_pair, save_agent, save_encoder, save_encoder_pair, AgentBundle};
pub use config::{PipelineConfig, TerrainPresets};
pub use dataset_io::{load_dataset, save_dataset};
