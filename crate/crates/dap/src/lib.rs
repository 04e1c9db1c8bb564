//! File formats, run directories, plots and the `dap` command line on top of
//! `dap-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod grid;
pub mod plots;
pub mod prompt_cache;

pub use error::{AppError, AppResult};
