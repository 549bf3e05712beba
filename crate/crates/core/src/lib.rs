//! Keyframe-conditioned view interpolation with a masked video diffusion
//! transformer trained jointly on multiview inpainting and view interpolation.

pub mod backbone;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod infer;
pub mod linalg;
pub mod optim;
pub mod schedule;
pub mod synth;
pub mod tasks;
pub mod tokens;

pub use error::{Error, Result};
