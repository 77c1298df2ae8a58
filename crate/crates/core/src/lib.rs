//! Uncertainty-aware pose-graph SLAM on synthetic data.
//!
//! The crate covers the full chain: a deterministic world simulator,
//! mixture-density odometry heads and their training, embedding-based loop
//! detection, sub-loop consistency checks for loop proposals, a
//! Levenberg–Marquardt pose-graph back end and trajectory metrics.

pub mod geometry;
pub mod io;
pub mod learning;
pub mod loop_detection;
pub mod mdn;
pub mod metrics;
pub mod outlier_rejection;
pub mod pipeline;
pub mod pose_graph;
pub mod simulator;
