//! Synthetic dual-modality observations rendered from the simulator state.
//!
//! The camera is the only sensor that sees traffic-light color (its unique
//! information); geometry, road layout, and vehicle footprints are shared
//! between the camera and the BEV pseudo-LiDAR grid. Everything here is a
//! deterministic function of the scene.

use crate::autodiff::Tensor;
use crate::geometry::{ego_to_world, world_to_ego, Pose2D, Waypoint};
use crate::townsim::{rule_context, LightColor, ScenarioConfig, SimState};

/// Camera raster: channels x rows x cols, values in [0, 1].
pub const CAM_C: usize = 3;
pub const CAM_H: usize = 32;
pub const CAM_W: usize = 96;

/// BEV pseudo-LiDAR: channel 0 obstacle occupancy, channel 1 drivable mask.
pub const BEV_C: usize = 2;
pub const BEV_H: usize = 64;
pub const BEV_W: usize = 64;

/// Segmentation channels: drivable, non-drivable, objects-in-drivable, other.
pub const SEG_C: usize = 4;
pub const SEG_DRIVABLE: usize = 0;
pub const SEG_NON_DRIVABLE: usize = 1;
pub const SEG_OBJECTS: usize = 2;
pub const SEG_OTHER: usize = 3;

/// BEV covers the front sector: forward 0..32 m, lateral -16..16 m.
pub const BEV_RANGE: f64 = 32.0;

const HORIZON_ROW: usize = 10;
const DEPTH_SCALE: f64 = 32.0;

const SKY: [f64; 3] = [0.60, 0.80, 1.00];
const GRASS: [f64; 3] = [0.35, 0.55, 0.30];
const ROAD: [f64; 3] = [0.25, 0.25, 0.25];
const VEHICLE: [f64; 3] = [0.10, 0.10, 0.85];
/// Road marking painted across stop-sign influence zones; camera-only, like
/// light color.
const SIGN_BAND: [f64; 3] = [0.85, 0.35, 0.10];

fn light_rgb(color: LightColor) -> [f64; 3] {
    match color {
        LightColor::Red => [1.0, 0.05, 0.05],
        LightColor::Yellow => [1.0, 0.95, 0.05],
        LightColor::Green => [0.05, 1.0, 0.05],
    }
}

/// Ground point (ego frame) seen by a camera pixel below the horizon.
fn pixel_ground(row: usize, col: usize) -> Option<Waypoint> {
    if row <= HORIZON_ROW {
        return None;
    }
    let depth = DEPTH_SCALE / (row - HORIZON_ROW) as f64;
    let lateral = (col as f64 + 0.5 - CAM_W as f64 / 2.0) / (CAM_W as f64 / 2.0) * depth;
    Some(Waypoint::new(lateral, depth))
}

fn point_in_vehicle(world: (f64, f64), state: &SimState) -> bool {
    // treat the query point as a degenerate box center; cheap containment test
    state.npcs.iter().any(|npc| {
        let rel = world_to_ego(Pose2D::new(world.0, world.1, 0.0), npc.pose);
        rel.y.abs() <= crate::townsim::CAR_LENGTH / 2.0
            && rel.x.abs() <= crate::townsim::CAR_WIDTH / 2.0
    })
}

/// Toy RGB raster of the forward scene. Traffic-light state is painted as a
/// colored block whose size and position encode the stop-line distance.
pub fn render_camera(scenario: &ScenarioConfig, state: &SimState) -> Tensor {
    let mut grid = vec![0.0; CAM_C * CAM_H * CAM_W];
    let mut put = |c: usize, r: usize, col: usize, v: f64| {
        grid[(c * CAM_H + r) * CAM_W + col] = v;
    };
    for r in 0..CAM_H {
        for col in 0..CAM_W {
            let rgb = match pixel_ground(r, col) {
                None => SKY,
                Some(g) => {
                    let world = ego_to_world(g, state.ego.pose);
                    let wp = (world.x, world.y);
                    if point_in_vehicle(wp, state) {
                        VEHICLE
                    } else if scenario.map.is_drivable(wp) {
                        // the band clears once the stop requirement is met,
                        // so a stopped car can see the road open up again
                        let in_sign_zone = scenario.map.signs.iter().enumerate().any(|(i, sg)| {
                            state.sign_pending(i)
                                && crate::townsim::dist(wp, sg.position) <= sg.influence_radius
                        });
                        if in_sign_zone {
                            SIGN_BAND
                        } else {
                            ROAD
                        }
                    } else {
                        GRASS
                    }
                }
            };
            for (c, v) in rgb.iter().enumerate() {
                put(c, r, col, *v);
            }
        }
    }

    // sky banner: the camera's unique information. A signal gantry spans
    // the sky above the horizon and grows as the stop line (or stop-sign
    // zone) approaches; it shows the light color, or the sign color for a
    // pending stop sign.
    let ctx = rule_context(scenario, state);
    // the pending-sign banner always reaches full height so that "inside the
    // zone" and "approaching the zone" are never visually identical
    let banner = match ctx.light_color {
        Some(color) if ctx.y_stop.is_finite() => Some((light_rgb(color), ctx.y_stop, HORIZON_ROW)),
        _ if ctx.is_stop_sign => Some((SIGN_BAND, 5.0, HORIZON_ROW)),
        _ if ctx.sign_distance.is_finite() => {
            Some((SIGN_BAND, ctx.sign_distance + 5.0, HORIZON_ROW - 3))
        }
        _ => None,
    };
    if let Some((rgb, dist, cap)) = banner {
        let height = ((60.0 / dist).round() as usize).clamp(2, cap);
        for r in 0..height {
            for col in 0..CAM_W {
                for (c, v) in rgb.iter().enumerate() {
                    put(c, r, col, *v);
                }
            }
        }
    }
    Tensor::new(vec![CAM_C, CAM_H, CAM_W], grid)
}

/// Ego-frame ground point covered by a BEV cell center.
fn bev_cell_ground(row: usize, col: usize) -> Waypoint {
    // row 0 = farthest ahead, forward axis top-to-bottom
    let forward = BEV_RANGE * (1.0 - (row as f64 + 0.5) / BEV_H as f64);
    let lateral =
        (col as f64 + 0.5 - BEV_W as f64 / 2.0) / (BEV_W as f64 / 2.0) * (BEV_RANGE / 2.0);
    Waypoint::new(lateral, forward)
}

/// Two-channel occupancy grid of the front sector; contains no light color.
pub fn render_lidar(scenario: &ScenarioConfig, state: &SimState) -> Tensor {
    let mut grid = vec![0.0; BEV_C * BEV_H * BEV_W];
    for r in 0..BEV_H {
        for col in 0..BEV_W {
            let g = bev_cell_ground(r, col);
            let world = ego_to_world(g, state.ego.pose);
            let wp = (world.x, world.y);
            if point_in_vehicle(wp, state) {
                grid[r * BEV_W + col] = 1.0;
            }
            if scenario.map.is_drivable(wp) {
                grid[(BEV_H + r) * BEV_W + col] = 1.0;
            }
        }
    }
    Tensor::new(vec![BEV_C, BEV_H, BEV_W], grid)
}

fn seg_class(scenario: &ScenarioConfig, state: &SimState, world: (f64, f64)) -> usize {
    let drivable = scenario.map.is_drivable(world);
    if point_in_vehicle(world, state) && drivable {
        SEG_OBJECTS
    } else if drivable {
        SEG_DRIVABLE
    } else {
        SEG_NON_DRIVABLE
    }
}

fn one_hot_grid(h: usize, w: usize, classes: impl Fn(usize, usize) -> usize) -> Tensor {
    let mut grid = vec![0.0; SEG_C * h * w];
    for r in 0..h {
        for c in 0..w {
            let k = classes(r, c);
            grid[(k * h + r) * w + c] = 1.0;
        }
    }
    Tensor::new(vec![SEG_C, h, w], grid)
}

/// One-hot front-view segmentation ground truth (same geometry as the camera).
pub fn render_front_seg_gt(scenario: &ScenarioConfig, state: &SimState) -> Tensor {
    one_hot_grid(CAM_H, CAM_W, |r, c| match pixel_ground(r, c) {
        None => SEG_OTHER,
        Some(g) => {
            let world = ego_to_world(g, state.ego.pose);
            seg_class(scenario, state, (world.x, world.y))
        }
    })
}

/// One-hot top-down segmentation ground truth (same geometry as the BEV grid).
pub fn render_topdown_seg_gt(scenario: &ScenarioConfig, state: &SimState) -> Tensor {
    one_hot_grid(BEV_H, BEV_W, |r, c| {
        let g = bev_cell_ground(r, c);
        let world = ego_to_world(g, state.ego.pose);
        seg_class(scenario, state, (world.x, world.y))
    })
}

/// Previous-frame measurements fed to the policy: speed, throttle, steer, brake.
pub fn measurement_vec(prev: &crate::geometry::VehicleState) -> Tensor {
    Tensor::new(
        vec![4],
        vec![prev.speed, prev.throttle, prev.steer, prev.brake],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::townsim::{parse_scenario, SimState};

    fn empty_scenario() -> ScenarioConfig {
        parse_scenario(
            "townsim/1\n\
             ego = 0,0,90\n\
             route = 0,0 0,100\n",
        )
        .unwrap()
    }

    fn road_scenario(light: Option<&str>) -> ScenarioConfig {
        let light_block = match light {
            Some(spec) => format!("light = 0 | {spec}\nstopline = 0,12 | 90 | light 0\n"),
            None => String::new(),
        };
        parse_scenario(&format!(
            "townsim/1\n\
             ego = 0,0,90\n\
             lane = 6 | 0,0 0,300\n\
             {light_block}\
             route = 0,0 0,300\n",
        ))
        .unwrap()
    }

    #[test]
    fn empty_map_is_background_only() {
        let sc = empty_scenario();
        let s = SimState::init(&sc, 0);
        let cam = render_camera(&sc, &s);
        // no vehicle or road pixels anywhere
        for r in 0..CAM_H {
            for c in 0..CAM_W {
                let px = [
                    cam.data()[(0 * CAM_H + r) * CAM_W + c],
                    cam.data()[(CAM_H + r) * CAM_W + c],
                    cam.data()[(2 * CAM_H + r) * CAM_W + c],
                ];
                assert!(px == SKY || px == GRASS, "unexpected pixel {px:?}");
            }
        }
        let bev = render_lidar(&sc, &s);
        assert!(bev.data()[..BEV_H * BEV_W].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vehicle_ahead_visible_in_both_modalities() {
        let sc = parse_scenario(
            "townsim/1\n\
             ego = 0,0,90\n\
             lane = 6 | 0,0 0,300\n\
             npc = 0 | 0 | 0,5 0,6\n\
             route = 0,0 0,300\n",
        )
        .unwrap();
        let s = SimState::init(&sc, 0);
        let bev = render_lidar(&sc, &s);
        assert!(
            bev.data()[..BEV_H * BEV_W].iter().any(|&v| v > 0.0),
            "vehicle 5 m ahead must occupy BEV cells"
        );
        // hand-projected cell: ego-frame (0, 5) -> row, col
        let row = ((1.0 - 5.0 / BEV_RANGE) * BEV_H as f64) as usize;
        let col = BEV_W / 2;
        assert!(bev.data()[row * BEV_W + col] > 0.0 || bev.data()[(row - 1) * BEV_W + col] > 0.0);
        let cam = render_camera(&sc, &s);
        let has_vehicle_px = (0..CAM_H * CAM_W).any(|i| {
            [
                cam.data()[i],
                cam.data()[CAM_H * CAM_W + i],
                cam.data()[2 * CAM_H * CAM_W + i],
            ] == VEHICLE
        });
        assert!(has_vehicle_px, "vehicle must be painted in the camera");
    }

    #[test]
    fn light_color_changes_only_camera() {
        let red = road_scenario(Some("red:1000 green:1"));
        let green = road_scenario(Some("green:1000 red:1"));
        let sr = SimState::init(&red, 0);
        let sg = SimState::init(&green, 0);
        assert_eq!(
            render_lidar(&red, &sr).data(),
            render_lidar(&green, &sg).data()
        );
        assert_eq!(
            render_front_seg_gt(&red, &sr).data(),
            render_front_seg_gt(&green, &sg).data()
        );
        assert_eq!(
            render_topdown_seg_gt(&red, &sr).data(),
            render_topdown_seg_gt(&green, &sg).data()
        );
        let cr = render_camera(&red, &sr);
        let cg = render_camera(&green, &sg);
        assert_ne!(cr.data(), cg.data(), "light color must reach the camera");
        // pixels that differ must be exactly the painted light block
        let differing: Vec<usize> = (0..CAM_H * CAM_W)
            .filter(|i| {
                (0..3).any(|c| cr.data()[c * CAM_H * CAM_W + i] != cg.data()[c * CAM_H * CAM_W + i])
            })
            .collect();
        assert!(!differing.is_empty());
        for i in differing {
            let (r, c) = (i / CAM_W, i % CAM_W);
            assert!(
                r <= HORIZON_ROW,
                "non-light pixel differs at row {r} col {c}"
            );
        }
    }

    #[test]
    fn seg_grids_are_one_hot() {
        let sc = parse_scenario(
            "townsim/1\n\
             ego = 0,0,90\n\
             lane = 6 | 0,0 0,300\n\
             npc = 0 | 0 | 0,8 0,9\n\
             route = 0,0 0,300\n",
        )
        .unwrap();
        let s = SimState::init(&sc, 0);
        for seg in [render_front_seg_gt(&sc, &s), render_topdown_seg_gt(&sc, &s)] {
            let hw = seg.len() / SEG_C;
            for i in 0..hw {
                let sum: f64 = (0..SEG_C).map(|c| seg.data()[c * hw + i]).sum();
                assert_eq!(sum, 1.0, "pixel {i} channel sum {sum}");
            }
        }
    }

    #[test]
    fn vehicle_footprint_in_objects_channel() {
        let sc = parse_scenario(
            "townsim/1\n\
             ego = 0,0,90\n\
             lane = 6 | 0,0 0,300\n\
             npc = 0 | 0 | 0,8 0,9\n\
             route = 0,0 0,300\n",
        )
        .unwrap();
        let s = SimState::init(&sc, 0);
        let td = render_topdown_seg_gt(&sc, &s);
        let hw = BEV_H * BEV_W;
        let objects = &td.data()[SEG_OBJECTS * hw..(SEG_OBJECTS + 1) * hw];
        // oracle: objects channel is nonzero exactly where a BEV cell center
        // falls inside the npc footprint (on drivable ground)
        let mut expected = 0;
        for r in 0..BEV_H {
            for c in 0..BEV_W {
                let g = bev_cell_ground(r, c);
                let world = ego_to_world(g, s.ego.pose);
                let inside = point_in_vehicle((world.x, world.y), &s)
                    && sc.map.is_drivable((world.x, world.y));
                if inside {
                    expected += 1;
                    assert_eq!(objects[r * BEV_W + c], 1.0);
                } else {
                    assert_eq!(objects[r * BEV_W + c], 0.0);
                }
            }
        }
        assert!(expected > 0, "footprint must cover at least one cell");
    }
}
