//! Core library for a non-stop multi-view sensing and bin-picking simulator.
//!
//! The picking cycle it models starts with the robot leaving the bin: while
//! the arm carries an object to the drop location, the wrist camera captures
//! several depth views in motion, fuses them into one depth image of the
//! first (synchronized) view, recognizes what is left in the bin, and plans
//! the sensing path for the next cycle — so sensing rides along with the
//! place action instead of adding stops.
//!
//! Modules map onto the moving parts:
//! - [`geometry`]: poses, pinhole projection, sphere/plane/arc construction;
//! - [`depth`]: depth images and their PGM wire format;
//! - [`fusion`]: reprojection, ICP correction, and candidate voting;
//! - [`scene`]: synthetic piled scenes, ray-cast rendering, sensor noise,
//!   and kinematics reporting with synchronization jitter;
//! - [`planner`]: target centers, sensing-path construction, pose sampling;
//! - [`timing`]: the sensing-time model and takt accounting;
//! - [`tuner`]: offline sweep and selection of (views, speed, interval);
//! - [`cycle`]: the per-cycle orchestration and experiment harness;
//! - [`config`]: on-disk configuration for the CLI.

pub mod config;
pub mod cycle;
pub mod depth;
pub mod fusion;
pub mod geometry;
pub mod planner;
pub mod rng;
pub mod scene;
pub mod timing;
pub mod tuner;
