//! Sliding-window visual-inertial odometry in two flavors sharing one
//! IMU/solver backbone:
//!
//! - **structureless**: visual measurements enter as scalar epipolar
//!   constraints between keyframe pairs, so the state vector holds only the
//!   IMU states and the window size fixes the problem dimension;
//! - **structure-based**: the classic formulation with one inverse-depth
//!   parameter per feature track and reprojection residuals.
//!
//! The crate also ships a deterministic trajectory/IMU/feature simulator,
//! EuRoC-style CSV ingestion, TUM trajectory files, and ATE evaluation with
//! SE(3) or position+yaw alignment.

pub mod error;
pub mod estimator;
pub mod eval;
pub mod factors;
pub mod gradcheck;
pub mod imu;
pub mod io;
pub mod manifold;
pub mod marginal;
pub mod runner;
pub mod sim;

pub use error::{Error, Result};
