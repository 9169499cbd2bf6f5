pub mod blend;
pub mod coarse;
pub mod config;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod registration;
pub mod retrieval;
pub mod voxelgrid;

pub use error::{Error, Result};
