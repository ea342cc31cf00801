//! Numeric foundation: random streams, dense matrices, reverse-mode
//! differentiation and the optimizer.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;

pub use matrix::Matrix;
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{ParamId, ParamStore, SliceInfo};
pub use rng::Rng;
pub use tape::{Segments, Tape, Var};
