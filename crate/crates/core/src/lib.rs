//! Map-free visual localization by anchored robust motion averaging.
//!
//! Given database images with known, fixed poses and per-pair keypoint
//! matches, the solver estimates 6-DoF query poses without building a 3D
//! map: pairwise relative poses feed anchored rotation averaging,
//! translation averaging, and a track-based post optimization.

pub mod geom;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod postopt;
pub mod rotavg;
pub mod synth;
pub mod transavg;
pub mod twoview;

/// Identifier of a database or query image.
pub type ImageId = u64;

pub use geom::{CameraIntrinsics, Pose, Rotation3};
