//! Joint positive/negative training of a one-stream transformer tracker with a
//! target-indicating token and a distribution-based localization head.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod geometry;
pub mod heads;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod visuals;

pub use error::{Error, Result};
