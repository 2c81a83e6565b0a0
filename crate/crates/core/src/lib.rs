//! Context-concept encoders and masked context distillation for
//! multi-channel microscopy images.

pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod mcd;
pub mod params;
pub mod schema;
pub mod stats;
pub mod stems;
pub mod synth;

pub use error::{Error, Result};
