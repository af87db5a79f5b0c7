//! Multi-frame super-resolution with a low-rank (nuclear-norm) model.
//!
//! Low-resolution frames are registered to a reference frame, the observation
//! operators `D K C_i B_i` are built implicitly, and the high-resolution image
//! is recovered by ADMM with singular value thresholding.

pub mod cli;
pub mod color;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod ops;
pub mod pipeline;
pub mod registration;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{decompose_displacement, Displacement, GridGeometry, ImageGrid};
