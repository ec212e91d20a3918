//! Gridworld planning with value-iteration networks.

pub mod dataset;
mod error;
pub mod eval;
pub mod gridworld;
pub mod models;
pub mod render;
pub mod rl;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
