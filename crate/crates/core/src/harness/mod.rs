//! Configuration, data, models, training pipelines, checkpoints and cost
//! reports.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod trainer;
