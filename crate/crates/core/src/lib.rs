//! Face parsing with interlinked CNNs joined end to end by a differentiable
//! spatial-transformer cropper.
//!
//! The pipeline labels a resized face coarsely ([`icnn`]), predicts a
//! constrained affine window per facial part from the rough labels
//! ([`stn`]), crops each part from the padded original, labels the crops
//! with per-part networks and maps the results back onto the full canvas
//! ([`pipeline`]). Everything runs on the small reverse-mode tensor engine in
//! [`tensor`].

pub mod data;
mod error;
pub mod gradcheck;
pub mod icnn;
pub mod labels;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod stn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
