//! The two learnable networks and their on-disk format.

mod blocks;
pub mod checkpoint;
pub mod duration;
pub mod features;
pub mod vfnet;

pub use duration::{DurConfig, DurationNet, DurationSample};
pub use features::{FeatureSequence, PhonemeFrames, DROPPED_PHONEME};
pub use vfnet::{VectorField, VectorFieldNet, VfBatch, VfConfig};
