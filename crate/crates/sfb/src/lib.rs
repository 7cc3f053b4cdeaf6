//! Experiment harness: configuration, dataset files, checkpoints, the
//! per-seed pipeline and result tables.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod report;
