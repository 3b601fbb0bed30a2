//! Minimal reverse-mode autodiff and the network building blocks used by the
//! overlap and synchronization networks.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use layers::{Dense, GruCell, LayerNorm, Mlp};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore, Tensor};
pub use tape::{CustomOp, Gradients, Segments, Tape, Var};

/// Execution precision of a tape. Parameters are stored as `f32`; an `f64`
/// tape is used for finite-difference gradient checks.
pub trait Real:
    Float + Default + Debug + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}
