pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod graph;
pub mod manifest;
pub mod model;
pub mod plot;
pub mod report;
pub mod rng;
pub mod runtime;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};
