//! Std companion to `textalign-core`: on-disk formats (embedding caches,
//! checkpoints, dataset directories, metric logs), experiment drivers and
//! the `textalign` command-line tool.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod metrics;

pub use error::{LabError, Result};
