//! 3D object detection on sparse LiDAR point clouds, desk scale.
//!
//! The pipeline: multi-frame point clouds are voxelized into sparse BEV
//! pillars, embedded by a small per-point net with per-voxel max pooling,
//! processed by a hierarchical windowed-attention backbone with bucketed
//! variable-length batching, fused across scales, expanded by voxel
//! diffusion, and decoded by an anchor-free center head without NMS.
//!
//! Everything runs on a minimal double-precision tensor engine with
//! reverse-mode autodiff (`tensor`), so the whole net is trainable on CPU
//! and checkable against finite differences.

pub mod backbone;
pub mod boxes;
pub mod config;
pub mod error;
pub mod bench;
pub mod evalmetrics;
pub mod export;
pub mod head;
pub mod model;
pub mod scene;
pub mod selftest;
pub mod sparse;
pub mod synth;
pub mod train;
pub mod tensor;
pub mod transformer;
pub mod voxelize;
pub mod window;

pub use error::{Error, Result};
