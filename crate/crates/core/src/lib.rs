//! Online RGBD reconstruction with a compact Gaussian surfel map.
//!
//! The scene is a flat collection of 3D Gaussians, each constrained to be
//! either opaque (fits surface and dominant color) or nearly transparent
//! (fits residual color). Color is rendered by front-to-back alpha blending;
//! depth is rendered by intersecting each pixel ray with the disc plane of
//! the first sufficiently dense opaque Gaussian, which lets a single Gaussian
//! stand in for a local surface patch.
//!
//! The crate provides:
//! - the map/frame/pose domain types ([`types`], [`se3`], [`math`], [`sh`]),
//! - RGBD input pre-processing ([`preproc`]),
//! - a tile-based CPU rasterizer with an analytic backward pass ([`render`],
//!   [`loss`]),
//! - the on-the-fly mapping loop: error-driven adding, windowed optimization,
//!   fusion and state management ([`mapping`], [`optimizer`]),
//! - frame-to-model point-to-plane ICP tracking ([`tracking`]),
//! - keyframe-based global optimization ([`global_opt`]),
//! - dataset I/O, metrics, a synthetic scene generator and the full pipeline
//!   ([`dataset`], [`metrics`], [`scene`], [`pipeline`], [`fit`]).

pub mod dataset;
pub mod error;
pub mod fit;
pub mod global_opt;
pub mod grid;
pub mod loss;
pub mod mapping;
pub mod math;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod preproc;
pub mod render;
pub mod scene;
pub mod se3;
pub mod sh;
pub mod tracking;
pub mod types;

pub use error::{Error, Result};
pub use grid::Grid;
pub use se3::Pose;
pub use types::{
    CameraIntrinsics, Gaussian, GaussianId, GaussianKind, GaussianMap, GaussianState, RgbdFrame,
    RenderBuffers,
};
