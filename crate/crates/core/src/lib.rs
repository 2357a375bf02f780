//! Sparse certifiably robust classifiers: reverse-mode autodiff, interval and
//! linear-relaxation robustness bounds, robust training with periodic
//! parameter deactivation, and compaction to a dense deployable model.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod compact;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fetch;
pub mod lirpa;
pub mod model_file;
pub mod net;
pub mod par;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
