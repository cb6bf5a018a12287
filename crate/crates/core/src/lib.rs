//! Worst-case pose error analysis for point-to-plane ICP.
//!
//! The crate optimizes bounded per-point perturbations of a lidar scan so that
//! ICP against a fixed map lands as far as possible from the true pose, and
//! compares the result with heuristic corruption baselines.

// `!(x > 0.0)` is used on purpose so NaN inputs fail validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradients;
pub mod harness;
pub mod icp;
pub mod pointcloud;

pub use error::{Error, Result};
pub use geometry::{exp_se3, log_se3, pose_error, Pose, PoseError, Twist};
