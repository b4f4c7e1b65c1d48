//! Filesystem side of ASA-Net: dataset and checkpoint formats, run
//! configuration, training/evaluation runs with their exports, and the
//! ablation grids behind the `asanet` command-line tool.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod export;
pub mod runner;

pub use asanet_core as core;
pub use config::RunConfig;
pub use error::{Error, Result};
