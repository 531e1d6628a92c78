//! Experiment orchestration on top of the `ionstain` engine.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod studies;
