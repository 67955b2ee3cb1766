//! Deterministic 2D kinematic driving world: road layout, phased traffic
//! lights, stop signs, scripted obstacle vehicles, and infraction detection.
//!
//! All dynamics are pure functions of `(state, controls, dt)`; identical
//! inputs produce bit-identical traces.

use crate::geometry::{normalize_angle, world_to_ego, Pose2D, VehicleState};
use std::path::Path;
use thiserror::Error;

/// Kinematic bicycle constants (toy values; the dynamics model itself is a
/// stand-in for a full vehicle simulator).
pub const A_MAX: f64 = 3.0; // m/s^2 throttle acceleration
pub const B_MAX: f64 = 8.0; // m/s^2 brake deceleration
pub const V_MAX: f64 = 12.0; // m/s speed cap
pub const WHEELBASE: f64 = 2.5; // m
pub const DRAG: f64 = 0.1; // 1/s linear drag
pub const STEER_MAX_ANGLE: f64 = 0.5; // rad at full steer input

/// Ego/NPC collision footprint.
pub const CAR_LENGTH: f64 = 4.0;
pub const CAR_WIDTH: f64 = 1.8;

/// Stop-line lookahead for the rule context; beyond this a rule cannot
/// influence the 4-frame waypoint horizon.
pub const RULE_LOOKAHEAD: f64 = 20.0;

/// Max speed that still counts as "stopped" inside a stop-sign zone. The
/// simulator ground truth and the training penalty share this value.
pub const EPS_V: f64 = 0.5;

/// Lateral tolerance when testing a stop-line crossing.
const LINE_HALF_WIDTH: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightColor {
    Red,
    Yellow,
    Green,
}

#[derive(Debug, Clone)]
pub struct TrafficLight {
    pub id: usize,
    /// Cyclic schedule; every duration must be positive.
    pub phases: Vec<(LightColor, f64)>,
    pub phase_offset: f64,
}

/// Color of a light at absolute time `t`, by cyclic half-open intervals
/// `[start, end)`.
pub fn light_color_at(light: &TrafficLight, t: f64) -> LightColor {
    let cycle: f64 = light.phases.iter().map(|p| p.1).sum();
    assert!(cycle > 0.0, "light {} has an empty schedule", light.id);
    let mut u = (t + light.phase_offset).rem_euclid(cycle);
    for &(color, dur) in &light.phases {
        if u < dur {
            return color;
        }
        u -= dur;
    }
    light.phases[0].0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineControl {
    Light(usize),
    Sign(usize),
}

/// A stop line across a lane; crossing is measured along `heading`
/// (the direction of legal travel over the line).
#[derive(Debug, Clone)]
pub struct StopLine {
    pub position: (f64, f64),
    pub heading: f64,
    pub control: LineControl,
}

#[derive(Debug, Clone)]
pub struct StopSign {
    pub position: (f64, f64),
    pub influence_radius: f64,
}

#[derive(Debug, Clone)]
pub struct Lane {
    pub centerline: Vec<(f64, f64)>,
    pub width: f64,
}

/// Circular junction patch where lanes may cross; drivable area.
#[derive(Debug, Clone)]
pub struct Junction {
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TownMap {
    pub lanes: Vec<Lane>,
    pub junctions: Vec<Junction>,
    pub stop_lines: Vec<StopLine>,
    pub lights: Vec<TrafficLight>,
    pub signs: Vec<StopSign>,
}

impl TownMap {
    /// Distance from a point to the nearest drivable centerline, minus the
    /// local half-width. Negative inside the drivable corridor.
    pub fn offroad_distance(&self, p: (f64, f64)) -> f64 {
        let mut best = f64::INFINITY;
        for lane in &self.lanes {
            let d = polyline_distance(&lane.centerline, p) - lane.width / 2.0;
            best = best.min(d);
        }
        for j in &self.junctions {
            let d = ((p.0 - j.center.0).powi(2) + (p.1 - j.center.1).powi(2)).sqrt() - j.radius;
            best = best.min(d);
        }
        best
    }

    pub fn is_drivable(&self, p: (f64, f64)) -> bool {
        self.offroad_distance(p) <= 0.0
    }
}

/// NPC script: constant speed along a polyline (speed 0 = parked obstacle).
#[derive(Debug, Clone)]
pub struct NpcScript {
    pub path: Vec<(f64, f64)>,
    pub speed: f64,
    pub start_arc: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub map: TownMap,
    pub ego_start: Pose2D,
    pub route: Vec<(f64, f64)>,
    pub npcs: Vec<NpcScript>,
    pub time_limit: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfractionKind {
    CollisionPedestrian,
    CollisionVehicle,
    CollisionStatic,
    RedLight,
    StopSign,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub time: f64,
    pub route_index: usize,
}

/// Per-sign zone bookkeeping across steps.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SignZone {
    inside: bool,
    min_speed: f64,
    emitted: bool,
}

/// One timestep of the world. A value type: `step` never mutates its input.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub time: f64,
    pub ego: VehicleState,
    pub npcs: Vec<VehicleState>,
    npc_arcs: Vec<f64>,
    /// Ratcheted route-completion fraction.
    pub progress: f64,
    pub route_index: usize,
    /// Previous signed distance of the ego past each stop line.
    line_side: Vec<f64>,
    line_crossed: Vec<bool>,
    sign_zones: Vec<SignZone>,
    npc_hit: Vec<bool>,
    static_hit: bool,
    pub rng_seed: u64,
}

impl SimState {
    pub fn init(scenario: &ScenarioConfig, seed: u64) -> Self {
        let npcs: Vec<VehicleState> = scenario
            .npcs
            .iter()
            .map(|n| {
                let (pos, heading) = polyline_point(&n.path, n.start_arc);
                let mut v = VehicleState::at_rest(Pose2D::new(pos.0, pos.1, heading));
                v.speed = n.speed;
                v
            })
            .collect();
        let line_side = scenario
            .map
            .stop_lines
            .iter()
            .map(|l| line_signed_distance(l, scenario.ego_start.position()))
            .collect();
        Self {
            time: 0.0,
            ego: VehicleState::at_rest(scenario.ego_start),
            npcs,
            npc_arcs: scenario.npcs.iter().map(|n| n.start_arc).collect(),
            progress: route_projection(scenario.ego_start.position(), &scenario.route),
            route_index: 0,
            line_side,
            line_crossed: vec![false; scenario.map.stop_lines.len()],
            sign_zones: scenario
                .map
                .signs
                .iter()
                .map(|s| SignZone {
                    inside: dist(scenario.ego_start.position(), s.position) <= s.influence_radius,
                    min_speed: f64::INFINITY,
                    emitted: false,
                })
                .collect(),
            npc_hit: vec![false; scenario.npcs.len()],
            static_hit: false,
            rng_seed: seed,
        }
    }

    /// True while the stop requirement of sign `i` is unmet on this pass:
    /// the ego has not yet come to rest inside the influence zone.
    pub fn sign_pending(&self, i: usize) -> bool {
        let z = &self.sign_zones[i];
        !(z.inside && z.min_speed <= EPS_V)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite controls: steer={0}, throttle={1}, brake={2}")]
    NonFiniteControls(f64, f64, f64),
}

/// Advance the world one tick under the given ego controls.
pub fn step(
    scenario: &ScenarioConfig,
    state: &SimState,
    controls: (f64, f64, f64),
    dt: f64,
) -> Result<(SimState, Vec<InfractionEvent>), SimError> {
    let (steer, throttle, brake) = controls;
    if !steer.is_finite() || !throttle.is_finite() || !brake.is_finite() {
        return Err(SimError::NonFiniteControls(steer, throttle, brake));
    }
    assert!(dt > 0.0, "step requires dt > 0, got {dt}");
    let steer = steer.clamp(-1.0, 1.0);
    let throttle = throttle.clamp(0.0, 1.0);
    let brake = brake.clamp(0.0, 1.0);

    let mut next = state.clone();
    next.time = state.time + dt;

    // ego kinematic bicycle, semi-implicit euler
    let v0 = state.ego.speed;
    let accel = A_MAX * throttle - B_MAX * brake - DRAG * v0;
    let v1 = (v0 + accel * dt).clamp(0.0, V_MAX);
    // positive steer turns toward positive ego-frame x (clockwise in world
    // coordinates), matching the lateral axis of the ego frame
    let steer_angle = steer * STEER_MAX_ANGLE;
    let yaw_rate = -v1 / WHEELBASE * steer_angle.tan();
    let heading = normalize_angle(state.ego.pose.heading + yaw_rate * dt);
    let mid_heading = normalize_angle(state.ego.pose.heading + 0.5 * yaw_rate * dt);
    let x = state.ego.pose.x + v1 * mid_heading.cos() * dt;
    let y = state.ego.pose.y + v1 * mid_heading.sin() * dt;
    next.ego = VehicleState {
        pose: Pose2D::new(x, y, heading),
        speed: v1,
        steer,
        throttle,
        brake,
    };

    // scripted NPCs
    for (i, script) in scenario.npcs.iter().enumerate() {
        next.npc_arcs[i] = state.npc_arcs[i] + script.speed * dt;
        let (pos, h) = polyline_point(&script.path, next.npc_arcs[i]);
        next.npcs[i].pose = Pose2D::new(pos.0, pos.1, h);
        next.npcs[i].speed = script.speed;
    }

    // ratcheted route progress
    let proj = route_projection(next.ego.pose.position(), &scenario.route);
    next.progress = next.progress.max(proj);

    let mut events = Vec::new();

    // red-light crossings (one event per line per episode)
    for (i, line) in scenario.map.stop_lines.iter().enumerate() {
        let s = line_signed_distance(line, next.ego.pose.position());
        let prev = state.line_side[i];
        if prev < 0.0 && s >= 0.0 && !state.line_crossed[i] {
            let lateral = line_lateral_offset(line, next.ego.pose.position());
            if lateral.abs() <= LINE_HALF_WIDTH {
                next.line_crossed[i] = true;
                if let LineControl::Light(light_id) = line.control {
                    let light = &scenario.map.lights[light_id];
                    if light_color_at(light, state.time) == LightColor::Red {
                        events.push(InfractionEvent {
                            kind: InfractionKind::RedLight,
                            time: next.time,
                            route_index: state.route_index,
                        });
                    }
                }
            }
        }
        next.line_side[i] = s;
    }

    // stop-sign zones: violation = min speed across the zone above EPS_V
    for (i, sign) in scenario.map.signs.iter().enumerate() {
        let d = dist(next.ego.pose.position(), sign.position);
        let zone = &mut next.sign_zones[i];
        let inside = d <= sign.influence_radius;
        if inside {
            if !zone.inside {
                zone.min_speed = f64::INFINITY;
            }
            zone.min_speed = zone.min_speed.min(next.ego.speed);
        } else if zone.inside && !zone.emitted && zone.min_speed > EPS_V {
            zone.emitted = true;
            events.push(InfractionEvent {
                kind: InfractionKind::StopSign,
                time: next.time,
                route_index: state.route_index,
            });
        }
        zone.inside = inside;
    }

    // vehicle collisions (one per NPC per episode)
    for (i, npc) in next.npcs.iter().enumerate() {
        if !next.npc_hit[i] && boxes_overlap(&next.ego.pose, &npc.pose) {
            next.npc_hit[i] = true;
            events.push(InfractionEvent {
                kind: InfractionKind::CollisionVehicle,
                time: next.time,
                route_index: state.route_index,
            });
        }
    }

    // static layout collision: leaving the drivable corridor entirely
    if !next.static_hit && scenario.map.offroad_distance(next.ego.pose.position()) > 0.5 {
        next.static_hit = true;
        events.push(InfractionEvent {
            kind: InfractionKind::CollisionStatic,
            time: next.time,
            route_index: state.route_index,
        });
    }

    Ok((next, events))
}

/// Raw per-frame rule facts consumed by the penalty losses and the expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleContext {
    pub is_red: bool,
    /// Ego-frame forward distance to the governing stop line; +inf when no
    /// line is within the lookahead.
    pub y_stop: f64,
    pub is_stop_sign: bool,
    /// Forward distance to the stop-sign zone entry (0 when already inside).
    pub sign_distance: f64,
    /// Route heading change between the current arc position and one frame
    /// ahead at the current speed.
    pub delta_heading: f64,
    /// Current color of the nearest governing light within the lookahead.
    pub light_color: Option<LightColor>,
}

impl RuleContext {
    pub fn inactive() -> Self {
        Self {
            is_red: false,
            y_stop: f64::INFINITY,
            is_stop_sign: false,
            sign_distance: f64::INFINITY,
            delta_heading: 0.0,
            light_color: None,
        }
    }
}

/// Compute the rule context for the current state.
///
/// A light affects the ego when its stop line lies ahead in the ego frame
/// within [`RULE_LOOKAHEAD`] meters and has not been crossed yet. A stop sign
/// affects the ego while inside its influence zone with the stop requirement
/// not yet met, or when the zone entry lies ahead within the lookahead.
pub fn rule_context(scenario: &ScenarioConfig, state: &SimState) -> RuleContext {
    let mut ctx = RuleContext::inactive();
    let ego = state.ego.pose;

    let mut best_y = f64::INFINITY;
    for (i, line) in scenario.map.stop_lines.iter().enumerate() {
        if state.line_crossed[i] {
            continue;
        }
        let p = world_to_ego(Pose2D::new(line.position.0, line.position.1, 0.0), ego);
        if p.y > 0.0 && p.y <= RULE_LOOKAHEAD && p.x.abs() <= LINE_HALF_WIDTH && p.y < best_y {
            if let LineControl::Light(light_id) = line.control {
                let color = light_color_at(&scenario.map.lights[light_id], state.time);
                best_y = p.y;
                ctx.y_stop = p.y;
                ctx.light_color = Some(color);
                ctx.is_red = color == LightColor::Red;
            }
        }
    }

    let mut best_sign = f64::INFINITY;
    for (i, sign) in scenario.map.signs.iter().enumerate() {
        let zone = &state.sign_zones[i];
        let d = dist(ego.position(), sign.position);
        if zone.inside && zone.min_speed > EPS_V {
            ctx.is_stop_sign = true;
            ctx.sign_distance = 0.0;
            best_sign = 0.0;
        } else if !zone.inside && !zone.emitted {
            let p = world_to_ego(Pose2D::new(sign.position.0, sign.position.1, 0.0), ego);
            let entry = d - sign.influence_radius;
            if p.y > 0.0 && entry <= RULE_LOOKAHEAD && entry < best_sign {
                best_sign = entry;
                ctx.sign_distance = entry.max(0.0);
            }
        }
    }

    // route curvature one frame ahead
    let arc = route_arc_position(ego.position(), &scenario.route);
    let ahead = arc + (state.ego.speed * scenario.dt).max(1.0);
    let h_now = route_heading_at(&scenario.route, arc);
    let h_next = route_heading_at(&scenario.route, ahead);
    ctx.delta_heading = crate::geometry::heading_delta(h_next, h_now);
    ctx
}

/// Ratcheted route-completion fraction in [0, 1].
pub fn route_progress(state: &SimState, route: &[(f64, f64)]) -> f64 {
    state
        .progress
        .max(route_projection(state.ego.pose.position(), route))
}

// ---- polyline helpers ----

pub fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

pub fn polyline_length(pts: &[(f64, f64)]) -> f64 {
    pts.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Point and tangent heading at arc length `s` (clamped to the ends).
pub fn polyline_point(pts: &[(f64, f64)], s: f64) -> ((f64, f64), f64) {
    assert!(pts.len() >= 2, "polyline needs at least 2 points");
    let mut remaining = s.max(0.0);
    for w in pts.windows(2) {
        let seg = dist(w[0], w[1]);
        if remaining <= seg || seg == 0.0 {
            let t = if seg == 0.0 { 0.0 } else { remaining / seg };
            let p = (
                w[0].0 + (w[1].0 - w[0].0) * t,
                w[0].1 + (w[1].1 - w[0].1) * t,
            );
            let h = (w[1].1 - w[0].1).atan2(w[1].0 - w[0].0);
            return (p, h);
        }
        remaining -= seg;
    }
    let last = pts[pts.len() - 1];
    let prev = pts[pts.len() - 2];
    (last, (last.1 - prev.1).atan2(last.0 - prev.0))
}

/// Shortest distance from a point to a polyline.
pub fn polyline_distance(pts: &[(f64, f64)], p: (f64, f64)) -> f64 {
    let mut best = f64::INFINITY;
    for w in pts.windows(2) {
        best = best.min(segment_distance(w[0], w[1], p));
    }
    if pts.len() == 1 {
        best = dist(pts[0], p);
    }
    best
}

fn segment_distance(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    let abx = b.0 - a.0;
    let aby = b.1 - a.1;
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 {
        return dist(a, p);
    }
    let t = (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0);
    dist((a.0 + abx * t, a.1 + aby * t), p)
}

/// Arc length of the closest projection of `p` onto the route.
pub fn route_arc_position(p: (f64, f64), route: &[(f64, f64)]) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    let mut acc = 0.0;
    for w in route.windows(2) {
        let abx = w[1].0 - w[0].0;
        let aby = w[1].1 - w[0].1;
        let len2 = abx * abx + aby * aby;
        let seg = len2.sqrt();
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - w[0].0) * abx + (p.1 - w[0].1) * aby) / len2).clamp(0.0, 1.0)
        };
        let q = (w[0].0 + abx * t, w[0].1 + aby * t);
        let d = dist(q, p);
        if d < best.0 {
            best = (d, acc + seg * t);
        }
        acc += seg;
    }
    best.1
}

pub fn route_heading_at(route: &[(f64, f64)], s: f64) -> f64 {
    polyline_point(route, s).1
}

fn route_projection(p: (f64, f64), route: &[(f64, f64)]) -> f64 {
    let total = polyline_length(route);
    if total == 0.0 {
        return 0.0;
    }
    route_arc_position(p, route) / total
}

fn line_signed_distance(line: &StopLine, p: (f64, f64)) -> f64 {
    let (c, s) = (line.heading.cos(), line.heading.sin());
    (p.0 - line.position.0) * c + (p.1 - line.position.1) * s
}

fn line_lateral_offset(line: &StopLine, p: (f64, f64)) -> f64 {
    let (c, s) = (line.heading.cos(), line.heading.sin());
    (p.0 - line.position.0) * s - (p.1 - line.position.1) * c
}

/// Oriented-box overlap via separating axes; both boxes use the shared
/// car footprint.
pub fn boxes_overlap(a: &Pose2D, b: &Pose2D) -> bool {
    let ca = box_corners(a);
    let cb = box_corners(b);
    let axes = [
        (a.heading.cos(), a.heading.sin()),
        (-a.heading.sin(), a.heading.cos()),
        (b.heading.cos(), b.heading.sin()),
        (-b.heading.sin(), b.heading.cos()),
    ];
    for axis in axes {
        let pa = project(&ca, axis);
        let pb = project(&cb, axis);
        if pa.1 < pb.0 || pb.1 < pa.0 {
            return false;
        }
    }
    true
}

fn box_corners(p: &Pose2D) -> [(f64, f64); 4] {
    let (c, s) = (p.heading.cos(), p.heading.sin());
    let hl = CAR_LENGTH / 2.0;
    let hw = CAR_WIDTH / 2.0;
    let mut out = [(0.0, 0.0); 4];
    for (i, (dx, dy)) in [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)]
        .iter()
        .enumerate()
    {
        out[i] = (p.x + dx * c - dy * s, p.y + dx * s + dy * c);
    }
    out
}

fn project(corners: &[(f64, f64); 4], axis: (f64, f64)) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in corners {
        let v = c.0 * axis.0 + c.1 * axis.1;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

// ---- scenario text format ----

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing or wrong header: expected 'townsim/1'")]
    BadHeader,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scenario invalid: {0}")]
    Invalid(String),
}

/// Parse one scenario from the `townsim/1` text format.
///
/// ```text
/// townsim/1
/// name = straight_red
/// dt = 0.5
/// time_limit = 60
/// ego = 0,0,90                     # x, y, heading degrees
/// lane = 6 | 0,0 0,300             # width | centerline points
/// junction = 0,60 | 10             # center | radius
/// light = 0 | red:10 green:10      # phase offset | schedule
/// stopline = 0,55 | 90 | light 0   # position | travel heading deg | control
/// sign = 0,140 | 4                 # position | influence radius
/// route = 0,0 0,300
/// npc = 0 | 0 | 3,80 3,80          # speed | start arc | path points
/// ```
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let mut lines = text.lines().enumerate();
    let header = lines
        .by_ref()
        .map(|(_, l)| l.trim())
        .find(|l| !l.is_empty())
        .ok_or(ScenarioError::BadHeader)?;
    if header != "townsim/1" {
        return Err(ScenarioError::BadHeader);
    }

    let mut name = String::from("unnamed");
    let mut dt = 0.5;
    let mut time_limit = 60.0;
    let mut ego = None;
    let mut map = TownMap::default();
    let mut route = Vec::new();
    let mut npcs = Vec::new();

    for (lineno, raw) in lines {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ScenarioError::Parse {
            line: lineno + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        let fields: Vec<&str> = value.split('|').map(str::trim).collect();
        match key {
            "name" => name = value.to_string(),
            "dt" => dt = parse_f64(value).map_err(err)?,
            "time_limit" => time_limit = parse_f64(value).map_err(err)?,
            "ego" => {
                let v = parse_f64_list(value).map_err(err)?;
                if v.len() != 3 {
                    return Err(err("ego needs x,y,heading_deg".into()));
                }
                ego = Some(Pose2D::new(v[0], v[1], v[2].to_radians()));
            }
            "lane" => {
                if fields.len() != 2 {
                    return Err(err("lane = width | points".into()));
                }
                map.lanes.push(Lane {
                    width: parse_f64(fields[0]).map_err(err)?,
                    centerline: parse_points(fields[1]).map_err(err)?,
                });
            }
            "junction" => {
                if fields.len() != 2 {
                    return Err(err("junction = center | radius".into()));
                }
                let c = parse_points(fields[0]).map_err(err)?;
                map.junctions.push(Junction {
                    center: c[0],
                    radius: parse_f64(fields[1]).map_err(err)?,
                });
            }
            "light" => {
                if fields.len() != 2 {
                    return Err(err("light = offset | phases".into()));
                }
                let mut phases = Vec::new();
                for tok in fields[1].split_whitespace() {
                    let (color, dur) = tok
                        .split_once(':')
                        .ok_or_else(|| err(format!("phase '{tok}' needs color:seconds")))?;
                    let color = match color {
                        "red" => LightColor::Red,
                        "yellow" => LightColor::Yellow,
                        "green" => LightColor::Green,
                        other => return Err(err(format!("unknown light color '{other}'"))),
                    };
                    let dur = parse_f64(dur).map_err(err)?;
                    if dur <= 0.0 {
                        return Err(err(format!("phase duration must be > 0, got {dur}")));
                    }
                    phases.push((color, dur));
                }
                map.lights.push(TrafficLight {
                    id: map.lights.len(),
                    phases,
                    phase_offset: parse_f64(fields[0]).map_err(err)?,
                });
            }
            "stopline" => {
                if fields.len() != 3 {
                    return Err(err("stopline = pos | heading_deg | control".into()));
                }
                let pos = parse_points(fields[0]).map_err(err)?[0];
                let heading = parse_f64(fields[1]).map_err(err)?.to_radians();
                let ctl: Vec<&str> = fields[2].split_whitespace().collect();
                let control = match ctl.as_slice() {
                    ["light", id] => {
                        LineControl::Light(id.parse::<usize>().map_err(|e| err(e.to_string()))?)
                    }
                    ["sign", id] => {
                        LineControl::Sign(id.parse::<usize>().map_err(|e| err(e.to_string()))?)
                    }
                    _ => return Err(err(format!("bad stop-line control '{}'", fields[2]))),
                };
                map.stop_lines.push(StopLine {
                    position: pos,
                    heading,
                    control,
                });
            }
            "sign" => {
                if fields.len() != 2 {
                    return Err(err("sign = pos | radius".into()));
                }
                map.signs.push(StopSign {
                    position: parse_points(fields[0]).map_err(err)?[0],
                    influence_radius: parse_f64(fields[1]).map_err(err)?,
                });
            }
            "route" => route = parse_points(value).map_err(err)?,
            "npc" => {
                if fields.len() != 3 {
                    return Err(err("npc = speed | start_arc | path".into()));
                }
                npcs.push(NpcScript {
                    speed: parse_f64(fields[0]).map_err(err)?,
                    start_arc: parse_f64(fields[1]).map_err(err)?,
                    path: parse_points(fields[2]).map_err(err)?,
                });
            }
            other => return Err(err(format!("unknown key '{other}'"))),
        }
    }

    let ego_start = ego.ok_or_else(|| ScenarioError::Invalid("missing ego".into()))?;
    if route.len() < 2 {
        return Err(ScenarioError::Invalid(format!(
            "route needs at least 2 points, got {}",
            route.len()
        )));
    }
    for line in &map.stop_lines {
        match line.control {
            LineControl::Light(id) if id >= map.lights.len() => {
                return Err(ScenarioError::Invalid(format!(
                    "stop line references missing light {id}"
                )));
            }
            LineControl::Sign(id) if id >= map.signs.len() => {
                return Err(ScenarioError::Invalid(format!(
                    "stop line references missing sign {id}"
                )));
            }
            _ => {}
        }
    }
    if dt <= 0.0 {
        return Err(ScenarioError::Invalid(format!("dt must be > 0, got {dt}")));
    }
    Ok(ScenarioConfig {
        name,
        map,
        ego_start,
        route,
        npcs,
        time_limit,
        dt,
    })
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    parse_scenario(&std::fs::read_to_string(path)?)
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("bad number '{s}'"))
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|t| parse_f64(t.trim())).collect()
}

fn parse_points(s: &str) -> Result<Vec<(f64, f64)>, String> {
    let pts: Result<Vec<(f64, f64)>, String> = s
        .split_whitespace()
        .map(|tok| {
            let v = parse_f64_list(tok)?;
            if v.len() != 2 {
                return Err(format!("point '{tok}' needs x,y"));
            }
            Ok((v[0], v[1]))
        })
        .collect();
    let pts = pts?;
    if pts.is_empty() {
        return Err("empty point list".into());
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn straight_scenario() -> ScenarioConfig {
        parse_scenario(
            "townsim/1\n\
             name = straight\n\
             dt = 0.5\n\
             time_limit = 60\n\
             ego = 0,0,90\n\
             lane = 6 | 0,0 0,300\n\
             route = 0,0 0,300\n",
        )
        .unwrap()
    }

    fn red_light_scenario() -> ScenarioConfig {
        parse_scenario(
            "townsim/1\n\
             name = red\n\
             dt = 0.5\n\
             ego = 0,0,90\n\
             lane = 6 | 0,0 0,300\n\
             light = 0 | red:1000 green:10\n\
             stopline = 0,10 | 90 | light 0\n\
             route = 0,0 0,300\n",
        )
        .unwrap()
    }

    #[test]
    fn rest_state_stays_at_rest() {
        let sc = straight_scenario();
        let s0 = SimState::init(&sc, 0);
        let (s1, ev) = step(&sc, &s0, (0.0, 0.0, 0.0), 0.5).unwrap();
        assert_eq!(s1.ego.speed, 0.0);
        assert_eq!(s1.ego.pose.position(), s0.ego.pose.position());
        assert!(ev.is_empty());
    }

    #[test]
    fn constant_speed_displacement() {
        let sc = straight_scenario();
        let mut s = SimState::init(&sc, 0);
        s.ego.speed = 4.0;
        // throttle that exactly balances drag: a_max * u = drag * v
        let u = DRAG * 4.0 / A_MAX;
        let (s1, _) = step(&sc, &s, (0.0, u, 0.0), 0.5).unwrap();
        assert!((s1.ego.speed - 4.0).abs() < 1e-9);
        let moved = dist(s1.ego.pose.position(), s.ego.pose.position());
        assert!((moved - 2.0).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn red_light_event_fires_once() {
        let sc = red_light_scenario();
        let mut s = SimState::init(&sc, 0);
        s.ego.speed = 8.0;
        let mut total = Vec::new();
        for _ in 0..20 {
            let (s1, ev) = step(&sc, &s, (0.0, 0.5, 0.0), 0.5).unwrap();
            total.extend(ev);
            s = s1;
        }
        let reds: Vec<_> = total
            .iter()
            .filter(|e| e.kind == InfractionKind::RedLight)
            .collect();
        assert_eq!(reds.len(), 1, "expected exactly one red-light event");
    }

    #[test]
    fn light_schedule_lookup() {
        let light = TrafficLight {
            id: 0,
            phases: vec![(LightColor::Red, 10.0), (LightColor::Green, 10.0)],
            phase_offset: 0.0,
        };
        assert_eq!(light_color_at(&light, 0.0), LightColor::Red);
        // boundary belongs to the next phase (half-open intervals)
        assert_eq!(light_color_at(&light, 10.0), LightColor::Green);
        assert_eq!(light_color_at(&light, 25.0), LightColor::Red);
    }

    #[test]
    fn rule_context_red_line_ahead() {
        let sc = red_light_scenario();
        let mut s = SimState::init(&sc, 0);
        s.ego.pose = Pose2D::new(0.0, 3.0, PI / 2.0);
        // re-init line side bookkeeping for the moved ego
        let s = SimState {
            line_side: sc
                .map
                .stop_lines
                .iter()
                .map(|l| line_signed_distance(l, s.ego.pose.position()))
                .collect(),
            ..s
        };
        let ctx = rule_context(&sc, &s);
        assert!(ctx.is_red);
        assert!((ctx.y_stop - 7.0).abs() < 1e-9, "y_stop = {}", ctx.y_stop);
    }

    #[test]
    fn rule_context_green_not_affecting() {
        let sc = parse_scenario(
            "townsim/1\n\
             ego = 0,0,90\n\
             lane = 6 | 0,0 0,300\n\
             light = 0 | green:1000 red:10\n\
             stopline = 0,10 | 90 | light 0\n\
             route = 0,0 0,300\n",
        )
        .unwrap();
        let s = SimState::init(&sc, 0);
        let ctx = rule_context(&sc, &s);
        assert!(!ctx.is_red);
        assert_eq!(ctx.light_color, Some(LightColor::Green));
    }

    #[test]
    fn rule_context_straight_route_no_curvature() {
        let sc = straight_scenario();
        let mut s = SimState::init(&sc, 0);
        s.ego.speed = 5.0;
        let ctx = rule_context(&sc, &s);
        assert_eq!(ctx.delta_heading, 0.0);
    }

    #[test]
    fn route_progress_endpoints_and_midpoint() {
        let sc = straight_scenario();
        let mut s = SimState::init(&sc, 0);
        assert_eq!(route_progress(&s, &sc.route), 0.0);
        s.ego.pose = Pose2D::new(0.0, 150.0, PI / 2.0);
        assert!((route_progress(&s, &sc.route) - 0.5).abs() < 1e-12);
        s.ego.pose = Pose2D::new(0.0, 300.0, PI / 2.0);
        assert!((route_progress(&s, &sc.route) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_controls_rejected() {
        let sc = straight_scenario();
        let s = SimState::init(&sc, 0);
        assert!(step(&sc, &s, (f64::NAN, 0.0, 0.0), 0.5).is_err());
    }

    #[test]
    fn determinism_bit_identical() {
        let sc = red_light_scenario();
        let run = || {
            let mut s = SimState::init(&sc, 7);
            let mut trace = Vec::new();
            for i in 0..40 {
                let u = (i as f64 * 0.37).sin().abs();
                let (s1, ev) = step(&sc, &s, (0.1, u, 0.0), 0.5).unwrap();
                trace.push((s1.ego.pose.x, s1.ego.pose.y, s1.ego.speed, ev.len()));
                s = s1;
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stop_sign_violation_and_compliance() {
        let sc = parse_scenario(
            "townsim/1\n\
             ego = 0,0,90\n\
             lane = 6 | 0,0 0,300\n\
             sign = 0,20 | 4\n\
             route = 0,0 0,300\n",
        )
        .unwrap();
        // blow through the zone at speed
        let mut s = SimState::init(&sc, 0);
        s.ego.speed = 8.0;
        let mut events = Vec::new();
        for _ in 0..20 {
            let (s1, ev) = step(&sc, &s, (0.0, 0.3, 0.0), 0.5).unwrap();
            events.extend(ev);
            s = s1;
        }
        assert_eq!(
            events
                .iter()
                .filter(|e| e.kind == InfractionKind::StopSign)
                .count(),
            1
        );
        // creep through slowly: no violation
        let mut s = SimState::init(&sc, 0);
        s.ego.speed = 0.3;
        let mut events = Vec::new();
        for _ in 0..400 {
            let u = DRAG * 0.3 / A_MAX;
            let (s1, ev) = step(&sc, &s, (0.0, u, 0.0), 0.5).unwrap();
            events.extend(ev);
            s = s1;
        }
        assert!(events.iter().all(|e| e.kind != InfractionKind::StopSign));
    }

    #[test]
    fn parse_errors_are_located() {
        let bad = "townsim/1\nego = 0,0\nroute = 0,0 1,1\n";
        match parse_scenario(bad) {
            Err(ScenarioError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn red_events_match_crossings(offset in 0.0..20.0f64, red_dur in 1.0..20.0f64, green_dur in 1.0..20.0f64) {
            // one line; ego drives straight through; event iff red at crossing
            let sc = parse_scenario(&format!(
                "townsim/1\n\
                 ego = 0,0,90\n\
                 lane = 6 | 0,0 0,300\n\
                 light = {offset} | red:{red_dur} green:{green_dur}\n\
                 stopline = 0,15 | 90 | light 0\n\
                 route = 0,0 0,300\n",
            )).unwrap();
            let mut s = SimState::init(&sc, 0);
            s.ego.speed = 6.0;
            let mut events = Vec::new();
            let mut crossing_time = None;
            for _ in 0..30 {
                let before = s.ego.pose.y;
                let (s1, ev) = step(&sc, &s, (0.0, 0.2, 0.0), 0.5).unwrap();
                if before < 15.0 && s1.ego.pose.y >= 15.0 {
                    crossing_time = Some(s.time);
                }
                events.extend(ev);
                s = s1;
            }
            let reds = events.iter().filter(|e| e.kind == InfractionKind::RedLight).count();
            let t = crossing_time.expect("ego must cross the line");
            let expected = if light_color_at(&sc.map.lights[0], t) == LightColor::Red { 1 } else { 0 };
            prop_assert_eq!(reds, expected);
        }

        #[test]
        fn progress_is_monotone(controls in proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64, -1.0..1.0f64), 30)) {
            let sc = straight_scenario();
            let mut s = SimState::init(&sc, 0);
            let mut last = route_progress(&s, &sc.route);
            for (t, b, st) in controls {
                let (s1, _) = step(&sc, &s, (st, t, b), 0.5).unwrap();
                let p = route_progress(&s1, &sc.route);
                prop_assert!(p >= last - 1e-15);
                last = p;
                s = s1;
            }
        }
    }
}
