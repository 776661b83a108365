//! LiDAR-inertial SLAM for multi-story buildings with structural plane
//! constraints, plus the simulator used to verify it.

// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod graph;
pub mod imu;
pub mod io;
pub mod matching;
pub mod pipeline;
pub mod scan;
pub mod sim;
pub mod solver;
pub mod srp;
