//! Fingertip affordance prediction and dexterous grasp execution.

pub mod affordance_net;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod grounding_eval;
pub mod io;
pub mod kinematics;
pub mod qp;
pub mod scene_gen;
pub mod scene_lifting;
pub mod testbed;
pub mod tensorkit;
pub mod tracker;
pub mod waypoint_planner;

pub use error::{Error, Result};
