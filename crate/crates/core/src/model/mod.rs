//! Plenoptic camera model: thin main lens, pinhole micro lenses, and raw-image
//! distortion.
//!
//! A camera-frame point is imaged by the main lens into the virtual image
//! (lateral pixel coordinates plus virtual depth `v`), from where every micro
//! lens reprojects it onto the sensor. Distortion acts on raw sensor
//! coordinates and on the micro image centers alike.

mod distortion;
mod grid;
mod intrinsics;
mod pose;
mod projection;

pub use distortion::{DistortionCoeffs, UNDISTORT_MAX_ITER, UNDISTORT_TOLERANCE};
pub use grid::{default_micro_image_radius, MicroLensGrid, PointIndex};
pub use intrinsics::{IntrinsicParam, PlenopticIntrinsics, NUM_INTRINSIC_PARAMS};
pub use pose::{skew, Pose};
pub use projection::{
    main_lens_image_distance, micro_lens_center, micro_lens_centers, project_full, project_full_with_jacobian,
    project_micro, project_micro_with_jacobian, project_to_virtual, project_virtual_to_raw, FullJacobian,
    MicroJacobian,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("object depth z_C = {z} does not exceed the focal length {f_l}")]
    DegenerateDepth { z: f64, f_l: f64 },
    #[error("virtual depth {v} is not positive")]
    NonPositiveVirtualDepth { v: f64 },
    #[error("virtual depth {v} does not exceed 1 (virtual image in front of the sensor)")]
    VirtualDepthTooSmall { v: f64 },
    #[error("projection lies {distance:.3} px from the center of micro image {lens}")]
    OutOfMicroImage { lens: usize, distance: f64 },
    #[error("unknown lens id {0}")]
    UnknownLens(usize),
    #[error("undistortion of ({x}, {y}) did not converge")]
    NoConvergence { x: f64, y: f64 },
    #[error("distortion is not invertible near ({x}, {y})")]
    NonInvertibleDistortion { x: f64, y: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid micro lens grid: {0}")]
    InvalidGrid(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// A point of the virtual image: lateral coordinates in pixels and the
/// dimensionless virtual depth `v = b / B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualPoint {
    pub x: f64,
    pub y: f64,
    pub v: f64,
}
