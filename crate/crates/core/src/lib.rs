//! Desk-scale penalty-constrained imitation learning for 2D driving.
//!
//! The crate is a self-contained pipeline: a deterministic 2D town simulator
//! with traffic lights and stop signs, synthetic dual-modality sensors, a
//! scripted rule-abiding expert, a binary episode store, a minimal
//! reverse-mode autodiff engine, a dual-encoder waypoint policy trained with
//! traffic-rule penalties and a contrastive alignment loss, PID waypoint
//! tracking, leaderboard-style metrics, and white-box adversarial attacks.

pub mod attacks;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod control;
pub mod dataset;
pub mod expert;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod sensors;
pub mod townsim;

pub use geometry::{heading_delta, Pose2D, VehicleState, Waypoint};
