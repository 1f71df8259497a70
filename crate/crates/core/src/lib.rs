//! Dual pose-graph semantic localization backend.
//!
//! Fuses drifting odometry with semantic landmark (racing gate) detections.
//! High-frequency detections accumulate in a short-lived temporary graph
//! whose per-landmark constraints are distilled into single refined edges on
//! a compact long-lived main graph, giving implicit loop closure without
//! unbounded graph growth. A deterministic racing-track simulator and a
//! trajectory-evaluation module round out the crate.

pub mod assoc;
pub mod dual;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod pipeline;
pub mod sim;
pub mod solver;

pub use geometry::{compose, relative, Pose, Rotation, Twist};
pub use graph::{GateId, Graph, NodeId};
