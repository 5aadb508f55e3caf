//! Joint video / world-knowledge flow matching at desk scale.

pub mod codec;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sample;
pub mod train;
pub mod worldfeat;
pub mod worldsim;

pub use error::{Error, Result};
