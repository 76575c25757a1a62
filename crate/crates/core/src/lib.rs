//! Referring multi-object tracking testbed: a toy memory-based tracker,
//! synthetic scenes, a Hungarian-matched trainer, adversarial attacks on the
//! tracker's inputs and the tracking metrics used to score them.

pub mod attack;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod scenegen;
pub mod trainer;

pub use error::{CoreError, Result};
