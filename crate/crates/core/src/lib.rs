//! Superpoint-guided 3D object detection: geometry-aware voting, superpoint
//! attention, superpoint-voxel fusion and multiple-assignment training on
//! colored point clouds.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod grouping;
pub mod harness;
pub mod head;
pub mod matching;
pub mod pipeline;
pub mod scene;
pub mod spatial;
pub mod superpoint;
pub mod synth;
pub mod voting;
pub mod voxel;

pub use error::{Error, Result};
