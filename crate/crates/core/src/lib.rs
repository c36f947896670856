//! Video-conditioned chord generation and expressive MIDI rendering.

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod expressive;
pub mod extract;
pub mod features;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod music;
pub mod pipeline;
pub mod regressor;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
