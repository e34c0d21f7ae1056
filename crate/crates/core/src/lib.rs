//! Brain-shift estimation toolkit: volumes and NIfTI IO, anatomical frames,
//! B-spline free-form deformations, distance transforms, multi-task losses,
//! a small encoder-decoder network trained from scratch, synthetic phantoms
//! and cross-validated evaluation.

pub mod config;
pub mod error;
pub mod eval;
pub mod ffd;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod nifti;
pub mod pipeline;
pub mod shape;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Geometry, Point3, Volume};
