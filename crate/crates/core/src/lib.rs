//! Guidance distillation laboratory on a closed-form conditional
//! Gaussian-mixture world.

pub mod checkpoint;
pub mod conditioning;
pub mod distill;
pub mod error;
pub mod eval;
pub mod field;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod samplers;
pub mod world;

pub use error::{Error, Result};
