pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod model;
pub mod infill;
pub mod augment;
pub mod datafilter;
pub mod synthworld;
pub mod flowmatch;
pub mod sampler;
pub mod eval;
pub mod cli;
