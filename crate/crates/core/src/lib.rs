//! Perception and actuation core for a kiwifruit flower-spraying robot.

// `!(x > 0.0)` is how NaN is rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classical;
pub mod config;
pub mod emulator;
pub mod error;
pub mod evaluator;
pub mod imageio;
pub mod interchange;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scheduler;
pub mod stereo;
pub mod synth;

pub use error::{Error, Result};
