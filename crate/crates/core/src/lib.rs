//! Articulated skeleton discovery and neural part-surface fitting from a
//! sparse ensemble of silhouettes with per-pixel semantic features.
//!
//! The pipeline runs in two phases. Discovery extracts a 2D skeleton tree
//! from a reference silhouette ([`skeleton2d`]) and lifts it to a symmetric
//! 3D skeleton ([`skeleton3d`]). Optimization then fits per-instance cameras,
//! bone rotations and frequency-decomposed part surfaces ([`partmodel`])
//! against every silhouette through a soft rasterizer ([`render`]) and the
//! objectives in [`losses`], driven by [`optim`]. [`export`] samples
//! textures, writes meshes and computes keypoint-transfer and IOU metrics.

pub mod diff;
pub mod geom;
pub mod ingest;
pub mod losses;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod partmodel;
pub mod pipeline;
pub mod render;
pub mod error;
pub mod export;
pub mod fixtures;
pub mod grid;
pub mod skeleton2d;
pub mod skeleton3d;

pub use error::{Error, Result};
