//! Experiment orchestration (placeholder while the core modules stabilize).

pub mod config;
