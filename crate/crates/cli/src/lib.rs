//! Run configuration, evaluation, reporting and the end-to-end
//! registration pipeline behind the `mdgd` binary.

pub mod config;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
