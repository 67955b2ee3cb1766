//! Geometry primitives and coordinate frames shared by the whole pipeline.
//!
//! Ego-frame convention, fixed project-wide: y is the forward axis,
//! x is the lateral axis (right-positive). All headings are radians in
//! (-pi, pi], measured from the world +x axis counterclockwise.

use std::f64::consts::PI;

/// Normalize an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// A 2D pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    /// Radians in (-pi, pi], normalized on construction.
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    /// Unit vector of the heading direction.
    pub fn forward(&self) -> (f64, f64) {
        (self.heading.cos(), self.heading.sin())
    }
}

/// A point in the ego frame: x lateral (right-positive), y forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }
}

/// Kinematic state of one vehicle plus its last applied controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub pose: Pose2D,
    /// m/s, never negative.
    pub speed: f64,
    /// Dimensionless, [-1, 1].
    pub steer: f64,
    /// [0, 1].
    pub throttle: f64,
    /// [0, 1].
    pub brake: f64,
}

impl VehicleState {
    pub fn at_rest(pose: Pose2D) -> Self {
        Self {
            pose,
            speed: 0.0,
            steer: 0.0,
            throttle: 0.0,
            brake: 0.0,
        }
    }

    /// Clamp all control fields into their legal ranges and floor speed at 0.
    pub fn clamped(mut self) -> Self {
        self.speed = self.speed.max(0.0);
        self.steer = self.steer.clamp(-1.0, 1.0);
        self.throttle = self.throttle.clamp(0.0, 1.0);
        self.brake = self.brake.clamp(0.0, 1.0);
        self
    }
}

/// Transform a world-frame point into the ego frame of `ego`.
///
/// The ego's own position maps to (0, 0); a point one meter ahead of the
/// ego maps to (0, 1).
pub fn world_to_ego(p: Pose2D, ego: Pose2D) -> Waypoint {
    let dx = p.x - ego.x;
    let dy = p.y - ego.y;
    let (c, s) = (ego.heading.cos(), ego.heading.sin());
    // Forward axis (ego y) is the heading direction; lateral axis (ego x)
    // is 90 degrees clockwise from it.
    Waypoint {
        x: dx * s - dy * c,
        y: dx * c + dy * s,
    }
}

/// Inverse of [`world_to_ego`]: place an ego-frame point back into the world.
pub fn ego_to_world(w: Waypoint, ego: Pose2D) -> Pose2D {
    let (c, s) = (ego.heading.cos(), ego.heading.sin());
    Pose2D::new(
        ego.x + w.x * s + w.y * c,
        ego.y - w.x * c + w.y * s,
        ego.heading,
    )
}

/// Signed smallest difference a - b, wrapped into (-pi, pi].
pub fn heading_delta(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}
