//! Conferrable-fingerprint toolkit for image classifiers.
//!
//! The pipeline: partition a dataset into defender/attacker halves, train a
//! victim plus positive (extraction-derived) and negative (independently
//! trained) network pools, adversarially train a perturbation generator
//! against those pools, filter the generated examples down to the ones whose
//! misclassification transfers to derived networks but not to independent
//! ones, and verify suspect networks in a label-only setting through the
//! accuracy-robustness distance of the resulting fingerprint pairs.

pub mod attacks;
pub mod data;
pub mod error;
pub mod fingerprint;
pub mod gan;
pub mod harness;
pub mod nn;
pub mod registry;
pub mod verify;
pub mod zoo;

pub use error::{Error, Result};
