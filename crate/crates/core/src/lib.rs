//! Fiducial-marker pose-graph SLAM.
//!
//! Three ways to run the same marker pose graph: full SLAM, SLAM seeded with
//! a prior marker map, and localization against a fixed prior map. The crate
//! also carries a synthetic marker world and the evaluation tooling used to
//! compare the modes under prior-map perturbation.

pub mod eval;
pub mod experiment;
pub mod graph;
pub mod map_store;
pub mod se3;
pub mod sim;

pub use graph::{FactorGraph, Mode, OptimizationReport, SolverConfig};
pub use map_store::MarkerMap;
pub use se3::{Pose, Rotation, Twist};
