//! Null controllability of an age- and size-structured population model with
//! degenerate spatial diffusion.

pub mod adjoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod forward;
pub mod hum;
pub mod model;
pub mod quad;
pub mod weighted_grid;

pub use error::{Error, Result};
