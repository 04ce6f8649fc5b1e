//! Batch pipeline for probabilistic GHI forecasting: data ingestion,
//! variable selection, individual models, rolling 48-hour forecasts,
//! forecast combination, scoring and reporting.

pub mod config;
pub mod models;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::PipelineConfig;
pub use pipeline::{exit_code, Pipeline, Stage, StageError};
