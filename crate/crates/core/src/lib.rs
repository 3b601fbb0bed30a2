//! Multiview point-cloud registration by learned motion synchronization.
//!
//! Pairwise registration produces a graph of noisy relative poses; a
//! recurrent graph network refines a spanning-tree initialization into
//! globally consistent absolute poses.

pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod matching;
pub mod posegraph;
pub mod synth;
pub mod sync;
pub mod nn;

pub use error::{Error, Result};
