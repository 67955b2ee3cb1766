//! Lateral/longitudinal PID tracking of predicted waypoints.

use crate::geometry::Waypoint;

#[derive(Debug, Clone, Copy)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral_clamp: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PidParams {
    pub lateral: PidGains,
    pub longitudinal: PidGains,
    /// Scale on the waypoint-derived target speed.
    pub target_speed_scale: f64,
    /// Below this target speed the controller commands a full stop.
    pub brake_threshold: f64,
    pub dt: f64,
}

impl Default for PidParams {
    fn default() -> Self {
        // gains tuned on the straight-route closed-loop smoke test
        Self {
            lateral: PidGains {
                kp: 1.0,
                ki: 0.1,
                kd: 0.2,
                integral_clamp: 2.0,
            },
            longitudinal: PidGains {
                kp: 1.5,
                ki: 0.05,
                kd: 0.3,
                integral_clamp: 2.0,
            },
            target_speed_scale: 1.0,
            brake_threshold: 0.4,
            dt: 0.5,
        }
    }
}

/// Integrator and derivative memory, owned per episode.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PidState {
    pub lat_integral: f64,
    pub lat_prev_error: f64,
    pub lon_integral: f64,
    pub lon_prev_error: f64,
}

fn pid(gains: &PidGains, error: f64, integral: &mut f64, prev: &mut f64, dt: f64) -> f64 {
    *integral = (*integral + error * dt).clamp(-gains.integral_clamp, gains.integral_clamp);
    let derivative = (error - *prev) / dt;
    *prev = error;
    gains.kp * error + gains.ki * *integral + gains.kd * derivative
}

/// Convert predicted ego-frame waypoints into (steer, throttle, brake).
///
/// Aim point is the mean of the first two waypoints; target speed comes from
/// their separation over one frame interval.
pub fn pid_control(
    waypoints: &[Waypoint],
    current_speed: f64,
    params: &PidParams,
    mut state: PidState,
) -> ((f64, f64, f64), PidState) {
    assert!(
        waypoints.len() >= 2,
        "pid_control needs at least 2 waypoints"
    );
    let (w0, w1) = (waypoints[0], waypoints[1]);
    let aim = Waypoint::new((w0.x + w1.x) / 2.0, (w0.y + w1.y) / 2.0);

    let target_speed = ((w0.x - w1.x).hypot(w0.y - w1.y) / params.dt) * params.target_speed_scale;

    // Full stop: brake with neutral steer and drop the controller state.
    // While waiting, the aim point sits at the origin and its bearing is
    // meaningless; integrating it would wind up the lateral term and yank
    // the wheel when the vehicle moves off again.
    if target_speed < params.brake_threshold {
        return ((0.0, 0.0, 1.0), PidState::default());
    }

    let heading_error = aim.x.atan2(aim.y.max(0.0));
    let steer = pid(
        &params.lateral,
        heading_error,
        &mut state.lat_integral,
        &mut state.lat_prev_error,
        params.dt,
    )
    .clamp(-1.0, 1.0);
    let lon_out = pid(
        &params.longitudinal,
        target_speed - current_speed,
        &mut state.lon_integral,
        &mut state.lon_prev_error,
        params.dt,
    );
    // negative speed error beyond what lifting the throttle can absorb
    // becomes a proportional brake command instead of a coast
    let (throttle, brake) = if lon_out >= 0.0 {
        (lon_out.clamp(0.0, 1.0), 0.0)
    } else {
        (0.0, (-lon_out).clamp(0.0, 1.0))
    };
    ((steer, throttle, brake), state)
}
