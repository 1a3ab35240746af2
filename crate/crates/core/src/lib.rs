//! Simulation and verification engine for invariance-time default models.

pub mod bsde;
pub mod config;
pub mod error;
pub mod functions;
pub mod gate;
pub mod grid;
pub mod measure;
pub mod hazard;
pub mod model;
pub mod paths;
pub mod pde;
pub mod report;
pub mod runner;
pub mod rng;
pub mod special;
pub mod transfer;

pub use error::{Error, Result};
