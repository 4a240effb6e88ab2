//! File formats and pipeline commands for [`vqa_debias_core`].
//!
//! - [`dataset_io`]: JSON Lines datasets with a header per split.
//! - [`checkpoint`]: the `DBVQA001` binary parameter format.
//! - [`config`]: flat `key = value` run configuration.
//! - [`report`]: metrics reports and comparisons, JSON plus aligned text.
//! - [`manifest`]: per-artifact run manifests with SHA-256 hashes.
//! - [`trainlog`]: JSON Lines training logs.
//! - [`commands`]: `generate`, `train`, `evaluate` and `compare`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod manifest;
pub mod report;
pub mod trainlog;

pub use error::{Error, Result};
