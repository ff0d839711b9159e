//! Magnetic-visual sensor-fusion SLAM for endoscopic capsule robots.
//!
//! The crate implements the full desk-scale pipeline: multiscale vessel
//! enhancement of poorly textured endoscopic frames, depth creation by
//! perspective shape from shading, joint photometric-geometric frame-to-model
//! pose tracking, magnetic 5-DoF localization against a Hall-sensor array,
//! switching particle-filter fusion with per-sensor failure detection, an
//! LSTM motion prior, non-rigid surfel mapping with loop closure, dual
//! quaternion hand-eye calibration, and a synthetic data simulator plus
//! evaluation tooling (ATE RMSE, surface RMSE, timing).
//!
//! All distances are in centimeters, angles in radians, magnetic fields in
//! microtesla, and time in seconds unless a doc comment says otherwise.
//!
//! Entry points:
//! - [`sim`] generates deterministic synthetic datasets.
//! - [`eval::run_pipeline`] runs the full SLAM loop over a dataset directory.
//! - Individual stages live in [`vessel`], [`sfs`], [`tracker`], [`magnetic`],
//!   [`fusion`], [`motion`], [`surfel`] and [`handeye`].
//!
//! The `capsule-slam` binary exposes each stage as a subcommand; the
//! `examples/` directory has one runnable example per capability.

pub mod camera;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod handeye;
pub mod image;
pub mod magnetic;
pub mod motion;
pub mod fusion;
pub mod sfs;
pub mod sim;
pub mod surfel;
pub mod tracker;
pub mod trajectory;
pub mod vessel;

pub use camera::{CameraIntrinsics, DepthImage};
pub use geometry::{DualQuaternion, Pose, Twist};
pub use image::{GrayImage, RgbImage};
