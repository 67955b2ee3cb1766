//! Rule-abiding scripted driver and the closed-loop episode collector.

use crate::dataset::Frame;
use crate::geometry::{world_to_ego, Pose2D};
use crate::sensors;
use crate::townsim::{
    self, polyline_length, route_arc_position, rule_context, InfractionEvent, InfractionKind,
    ScenarioConfig, SimState, A_MAX, DRAG, EPS_V,
};

#[derive(Debug, Clone, Copy)]
pub struct ExpertConfig {
    pub cruise_speed: f64,
    /// Comfortable deceleration used to compute approach speeds (m/s^2).
    pub approach_decel: f64,
    /// Hold time at a stop sign after coming to rest.
    pub stop_wait: f64,
    /// Rolling speed while crossing a stop-sign zone before the full stop.
    pub creep_speed: f64,
    /// Pure-pursuit lookahead distance.
    pub lookahead: f64,
    /// Ablation switch: when false the expert ignores red lights, mirroring
    /// a mistake-prone demonstrator.
    pub obey_red_lights: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 6.0,
            approach_decel: 2.5,
            stop_wait: 1.0,
            creep_speed: 1.2,
            lookahead: 6.0,
            obey_red_lights: true,
        }
    }
}

impl ExpertConfig {
    /// Stable hash of the configuration, recorded in episode headers.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in [
            self.cruise_speed,
            self.approach_decel,
            self.stop_wait,
            self.creep_speed,
            self.lookahead,
            if self.obey_red_lights { 1.0 } else { 0.0 },
        ] {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Per-episode expert memory (stop-sign hold timer).
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpertDriver {
    wait_remaining: f64,
}

/// Goal location for the policy: next route point at least 20 m ahead,
/// expressed in the ego frame.
pub const GOAL_MIN_AHEAD: f64 = 20.0;

pub fn goal_in_ego(scenario: &ScenarioConfig, state: &SimState) -> (f64, f64) {
    let arc = route_arc_position(state.ego.pose.position(), &scenario.route);
    let total = polyline_length(&scenario.route);
    let target_arc = (arc + GOAL_MIN_AHEAD).min(total);
    let (pos, _) = townsim::polyline_point(&scenario.route, target_arc);
    let w = world_to_ego(Pose2D::new(pos.0, pos.1, 0.0), state.ego.pose);
    (w.x, w.y)
}

/// Speed that still allows a comfortable stop `margin` meters before a point
/// `distance` meters ahead.
fn stoppable_speed(distance: f64, margin: f64, decel: f64) -> f64 {
    (2.0 * decel * (distance - margin).max(0.0)).sqrt()
}

impl ExpertDriver {
    /// One control decision. Pure pursuit laterally; longitudinally the
    /// minimum of cruise, curvature, red-light, stop-sign, and lead-vehicle
    /// speed caps.
    pub fn act(
        &mut self,
        scenario: &ScenarioConfig,
        state: &SimState,
        cfg: &ExpertConfig,
    ) -> (f64, f64, f64) {
        let ctx = rule_context(scenario, state);
        let v = state.ego.speed;

        // lateral: pure pursuit toward a route point `lookahead` meters ahead
        let arc = route_arc_position(state.ego.pose.position(), &scenario.route);
        let (target, _) = townsim::polyline_point(&scenario.route, arc + cfg.lookahead);
        let t_ego = world_to_ego(Pose2D::new(target.0, target.1, 0.0), state.ego.pose);
        let alpha = t_ego.x.atan2(t_ego.y.max(0.1));
        let ld = t_ego.norm().max(1.0);
        let steer_angle = (2.0 * townsim::WHEELBASE * alpha.sin() / ld).atan();
        let steer = (steer_angle / townsim::STEER_MAX_ANGLE).clamp(-1.0, 1.0);

        // longitudinal speed caps
        let mut target_speed = cfg.cruise_speed;
        target_speed = target_speed.min(cfg.cruise_speed / (1.0 + 4.0 * ctx.delta_heading.abs()));
        if cfg.obey_red_lights && ctx.is_red {
            target_speed = target_speed.min(stoppable_speed(ctx.y_stop, 2.0, cfg.approach_decel));
        }
        if ctx.sign_distance.is_finite() && ctx.sign_distance > 0.0 {
            // arrive at the zone entry already at creep speed, so the
            // in-zone crossing is demonstrated at a steady slow roll
            target_speed = target_speed.min(
                stoppable_speed(ctx.sign_distance, 0.0, cfg.approach_decel).max(cfg.creep_speed),
            );
        }
        if ctx.is_stop_sign {
            // stop immediately on zone entry: the pending zone demands a
            // full stop, so the demonstrated target while pending is zero
            target_speed = 0.0;
            if v <= EPS_V * 0.5 {
                self.wait_remaining = cfg.stop_wait;
            }
        }
        if self.wait_remaining > 0.0 {
            target_speed = 0.0;
            if v <= EPS_V * 0.5 {
                self.wait_remaining -= scenario.dt;
            }
        }
        // lead vehicle directly ahead: keep distance
        for npc in &state.npcs {
            let rel = world_to_ego(Pose2D::new(npc.pose.x, npc.pose.y, 0.0), state.ego.pose);
            if rel.y > 0.0 && rel.y < 15.0 && rel.x.abs() < 2.0 {
                target_speed = target_speed.min(stoppable_speed(rel.y, 6.0, cfg.approach_decel));
            }
        }

        let err = target_speed - v;
        if err < -0.3 || target_speed == 0.0 && v > 0.05 {
            (steer, 0.0, (-err * 0.6).clamp(0.1, 1.0))
        } else {
            let throttle = (err * 0.6 + DRAG * v / A_MAX).clamp(0.0, 1.0);
            (steer, throttle, 0.0)
        }
    }
}

/// One collected episode: frames plus the raw infraction record.
#[derive(Debug, Clone)]
pub struct Episode {
    pub scenario_name: String,
    pub frames: Vec<Frame>,
    pub events: Vec<InfractionEvent>,
    pub completion: f64,
    /// True when the expert collided; rejected episodes are not written.
    pub rejected: bool,
}

/// Number of future waypoints stored per frame.
pub const WAYPOINT_HORIZON: usize = 4;

/// Run the expert closed-loop and emit training frames.
///
/// Each frame stores the previous frame's measurements and the ego poses at
/// t+1..t+4 transformed into the frame-t ego frame; the final 4 sim steps
/// are dropped (no future).
pub fn collect_episode(scenario: &ScenarioConfig, cfg: &ExpertConfig, seed: u64) -> Episode {
    let mut state = SimState::init(scenario, seed);
    let mut driver = ExpertDriver::default();
    let mut events = Vec::new();
    let mut rejected = false;

    // partial frames without future waypoints yet, plus the pose history
    let mut partial: Vec<Frame> = Vec::new();
    let mut poses: Vec<Pose2D> = Vec::new();
    let mut prev_vehicle = state.ego;

    let steps = (scenario.time_limit / scenario.dt).ceil() as usize;
    for _ in 0..steps {
        let ctx = rule_context(scenario, &state);
        let light_state = match (ctx.light_color, ctx.y_stop.is_finite()) {
            (Some(townsim::LightColor::Red), true) => [1.0, 0.0, 0.0, 0.0],
            (Some(townsim::LightColor::Yellow), true) => [0.0, 1.0, 0.0, 0.0],
            (Some(townsim::LightColor::Green), true) => [0.0, 0.0, 1.0, 0.0],
            _ => [0.0, 0.0, 0.0, 1.0],
        };
        partial.push(Frame {
            camera: sensors::render_camera(scenario, &state),
            lidar: sensors::render_lidar(scenario, &state),
            front_seg: sensors::render_front_seg_gt(scenario, &state),
            td_seg: sensors::render_topdown_seg_gt(scenario, &state),
            meas: sensors::measurement_vec(&prev_vehicle),
            light_state,
            stop_sign_flag: if ctx.is_stop_sign { 1.0 } else { 0.0 },
            is_red: ctx.is_red,
            y_stop: ctx.y_stop,
            delta_heading: ctx.delta_heading,
            goal: goal_in_ego(scenario, &state),
            waypoints: [[0.0; 2]; WAYPOINT_HORIZON],
        });
        poses.push(state.ego.pose);
        prev_vehicle = state.ego;

        let controls = driver.act(scenario, &state, cfg);
        let (next, ev) = townsim::step(scenario, &state, controls, scenario.dt)
            .expect("expert controls are finite");
        for e in &ev {
            if matches!(
                e.kind,
                InfractionKind::CollisionVehicle
                    | InfractionKind::CollisionStatic
                    | InfractionKind::CollisionPedestrian
            ) {
                rejected = true;
            }
        }
        events.extend(ev);
        state = next;
        if rejected || townsim::route_progress(&state, &scenario.route) >= 0.999 {
            break;
        }
    }
    poses.push(state.ego.pose);

    // attach future waypoints; drop trailing frames without a full horizon
    let usable = partial.len().saturating_sub(WAYPOINT_HORIZON);
    let mut frames = Vec::with_capacity(usable);
    for (i, mut frame) in partial.into_iter().enumerate().take(usable) {
        for j in 0..WAYPOINT_HORIZON {
            let w = world_to_ego(
                Pose2D::new(poses[i + j + 1].x, poses[i + j + 1].y, 0.0),
                poses[i],
            );
            frame.waypoints[j] = [w.x, w.y];
        }
        frames.push(frame);
    }

    Episode {
        scenario_name: scenario.name.clone(),
        completion: townsim::route_progress(&state, &scenario.route),
        frames,
        events,
        rejected,
    }
}
