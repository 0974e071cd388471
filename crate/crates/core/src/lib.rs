//! Simulation and optimization toolkit for coded single-pixel imaging under
//! photon-counting (Poisson) and additive Gaussian noise.

pub mod bench;
pub mod data;
pub mod error;
pub mod learn;
pub mod linalg;
pub mod maskio;
pub mod masks;
pub mod measurement;
pub mod noise;
pub mod scalar;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Scalar;
