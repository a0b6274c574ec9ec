//! Incremental monocular 3D reconstruction on sparse voxel volumes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod encode;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gstf;
pub mod image;
pub mod lstf;
pub mod nn;
pub mod pipeline;
pub mod priors;
pub mod surface;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
