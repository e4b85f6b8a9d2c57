//! Dynamic-obstacle detection for LiDAR: a temporal occupancy grid for moving
//! object segmentation, density/proximity-filtered clustering, a Dubins-plane
//! EKF tracker, fusion of 3D cluster detections with 2D dynamic-grid
//! detections, a ray-cast LiDAR simulator and the detection evaluation
//! protocol.
//!
//! The learned BEV dynamic grid lives in the `storm-gridnet` crate; the types
//! it produces ([`bev::DynamicGrid`], [`bev::Detection2D`]) are defined here so
//! that fusion and the simulator's target rasterization share them.

pub mod bev;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod ogm;
pub mod simworld;
pub mod tracker;
pub mod types;

pub use error::{Error, Result};
pub use types::{EgoState, GroundTruthObstacle, PointCloudScan, Quat, Timestamp, Vec3};
