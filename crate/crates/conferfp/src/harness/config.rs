//! Experiment configuration (placeholder).
