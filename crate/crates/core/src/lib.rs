//! Gradient-guided diffusion sampling and generative optimization with
//! closed-form linear score models.

pub mod dataset;
pub mod error;
pub mod experiments;
pub mod guidance;
pub mod io;
pub mod linalg;
pub mod objective;
pub mod optimizer;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod verify;

pub use error::{Error, Result};
