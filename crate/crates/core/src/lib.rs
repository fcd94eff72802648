//! Factorized in-plane / through-plane transformer for simultaneous
//! denoising and longitudinal deblurring of 3D CT volumes.

pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod ecfn;
pub mod emsm;
pub mod error;
pub mod eval;
pub mod net;
pub mod objectives;
pub mod optim;
pub mod real;
pub mod params;
pub mod tensor;
pub mod train;
pub mod volume_ops;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use real::Real;
