pub mod analysis;
pub mod attbalance;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod momentum;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
