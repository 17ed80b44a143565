//! Part localization and differentiable cropping.
//!
//! A [`ThetaRow`] `[[s_x, 0, t_x], [0, s_y, t_y]]` maps corner-aligned
//! normalized patch coordinates to normalized source coordinates: it can
//! crop, translate and scale but never rotate or shear.

mod baseline;
mod crop;
mod locnet;
mod theta;

pub use baseline::{baseline_crop, integer_window, BaselineCrop, RoughFrame};
pub use crop::{affine_grid, crop_parts, crop_with_rows, remap_parts};
pub use locnet::{LocNet, LocNetConfig};
pub use theta::{centroid, theta_for_center, theta_ground_truth, ThetaForm, ThetaRow};
