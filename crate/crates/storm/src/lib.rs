//! End-to-end dynamic-obstacle detection: configuration, the per-frame
//! pipeline, scripted scenarios, experiments and runtime benchmarks.

pub mod bench;
pub mod config;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod scenarios;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use experiment::Method;
pub use pipeline::{load_model, FrameOutput, Pipeline, StageTimes};
