//! Depth-guided detection transformer for monocular 3D object detection,
//! with its own tensor/autodiff core, synthetic data, and KITTI-style
//! evaluation.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod depth;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod imageio;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod train;
pub mod transformer;
