//! Calibration of focused plenoptic (micro-lens array) cameras.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ba;
pub mod downstream;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod model;
pub mod observations;
pub mod par;
pub mod pipeline;
pub mod plenoptic_init;
pub mod sfm;
pub mod synthgen;
