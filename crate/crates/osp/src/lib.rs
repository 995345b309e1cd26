//! Dataset and checkpoint formats, training, experiments and the command
//! line for point-query occupancy prediction. The numerical core lives in
//! `osp-core`.

pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod manifest;
pub mod model;
pub mod report;
pub mod train;

pub use error::{OspError, Result};
