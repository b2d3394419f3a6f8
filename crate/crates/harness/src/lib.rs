//! Training, evaluation, inference and robustness sweeps for the
//! forgery localization model, plus the checkpoint and dataset formats they
//! share.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod pipeline;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
