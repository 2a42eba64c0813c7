//! Reference-free detection of always-on parasitic activity in repeated-execution
//! EM side-channel traces by cross-scale persistence analysis.
//!
//! Pipeline: traces → STFT spectrograms at several window sizes → per-batch
//! stability maps → (frequency, stability) point clouds → BIC-selected
//! Gaussian mixture order → saturation / variance / median curves across
//! window sizes → rule-based verdict.

pub mod cli;
pub mod detect;
pub mod error;
pub mod mixture;
pub mod persistence;
pub mod seeds;
pub mod spectral;
pub mod stability;
pub mod synthgen;
pub mod trace;

pub use error::{Error, Result};
