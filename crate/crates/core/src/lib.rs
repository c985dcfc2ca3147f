//! Geometry-disentangled point-cloud networks.
//!
//! The crate builds kNN graphs over point clouds, splits points into sharp
//! and gentle variation components with a graph high-pass filter, fuses the
//! two components back into the original features with cross attention, and
//! trains small classification and part-segmentation networks on top.

pub mod cli;
pub mod error;
pub mod gdm;
pub mod graph;
pub mod model;
pub mod pointcloud;
pub mod sgcam;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
