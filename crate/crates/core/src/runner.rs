//! End-to-end pipeline commands: collect demonstrations, train, run the
//! closed-loop benchmark (clean or attacked), and aggregate scores.

use crate::attacks::{self, AttackError, DotPattern};
use crate::autodiff::{adam_step, AdamState, Tape, Tensor};
use crate::config::{ConfigError, RunConfig};
use crate::control::{pid_control, PidParams, PidState};
use crate::dataset::{self, DatasetError, Frame};
use crate::expert::{self, ExpertConfig, WAYPOINT_HORIZON};
use crate::geometry::{Pose2D, Waypoint};
use crate::losses::{total_loss, LossError};
use crate::metrics::{
    driving_score, infraction_score, mean_infraction_score, mean_std, route_completion,
    InfractionCounts, RouteResult,
};
use crate::model::{Batch, Mode, Model, ModelError};
use crate::sensors;
use crate::townsim::{
    self, rule_context, LightColor, ScenarioConfig, ScenarioError, SimError, SimState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no scenario files found in {0}")]
    NoScenarios(PathBuf),
    #[error("no episode files found in {0}")]
    NoData(PathBuf),
    #[error("malformed report line {line}: {msg}")]
    BadReport { line: usize, msg: String },
}

/// Load every `*.town` scenario in a directory, sorted by file name.
pub fn load_scenario_pack(dir: &Path) -> Result<Vec<ScenarioConfig>, RunnerError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "town"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(RunnerError::NoScenarios(dir.to_path_buf()));
    }
    paths
        .iter()
        .map(|p| townsim::load_scenario(p).map_err(RunnerError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectReport {
    pub kept: Vec<String>,
    pub rejected: Vec<String>,
}

impl CollectReport {
    pub fn render(&self) -> String {
        let mut out = String::from("collect/1\n");
        for k in &self.kept {
            let _ = writeln!(out, "kept {k}");
        }
        for r in &self.rejected {
            let _ = writeln!(out, "rejected {r}");
        }
        let _ = writeln!(
            out,
            "total kept={} rejected={}",
            self.kept.len(),
            self.rejected.len()
        );
        out
    }
}

/// Drive the expert over every scenario and write accepted episodes.
pub fn cmd_collect(cfg: &RunConfig) -> Result<CollectReport, RunnerError> {
    cfg.validate()?;
    let scenarios = load_scenario_pack(&cfg.scenario_dir)?;
    std::fs::create_dir_all(&cfg.data_dir)?;
    let expert_cfg = ExpertConfig {
        cruise_speed: cfg.cruise_speed,
        ..ExpertConfig::default()
    };
    let mut report = CollectReport {
        kept: Vec::new(),
        rejected: Vec::new(),
    };
    // Each scenario is collected from the nominal start plus laterally and
    // angularly perturbed starts, so the data shows how to recover toward
    // the lane center instead of only perfectly-centered driving.
    let variants: [(f64, f64); 3] = [
        (0.0, 0.0),
        (1.0, -4f64.to_radians()),
        (-1.0, 4f64.to_radians()),
    ];
    for sc in &scenarios {
        for (vi, (dx, dh)) in variants.iter().enumerate() {
            let mut sc_v = sc.clone();
            let start = sc.ego_start;
            let shifted = crate::geometry::ego_to_world(Waypoint::new(*dx, 0.0), start);
            sc_v.ego_start = Pose2D::new(shifted.x, shifted.y, start.heading + dh);
            let ep = expert::collect_episode(&sc_v, &expert_cfg, cfg.seed);
            let tag = format!("{}_v{vi}", sc.name);
            if ep.rejected {
                report.rejected.push(tag);
                continue;
            }
            let path = cfg.data_dir.join(format!("{tag}.ep"));
            dataset::write_episode(&path, &tag, sc.dt, expert_cfg.hash(), &ep.frames)?;
            report.kept.push(tag);
        }
    }
    Ok(report)
}

/// Read every `*.ep` file in the data directory, sorted by file name.
pub fn load_frames(data_dir: &Path) -> Result<Vec<Frame>, RunnerError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(data_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ep"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(RunnerError::NoData(data_dir.to_path_buf()));
    }
    let mut frames = Vec::new();
    for p in &paths {
        let (_, mut eps) = dataset::read_episode(p)?;
        frames.append(&mut eps);
    }
    Ok(frames)
}

/// Train a model on the collected frames; writes the checkpoint, the
/// per-step loss log, and the resolved config into `out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf, RunnerError> {
    cfg.validate()?;
    let frames = load_frames(&cfg.data_dir)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.serialize())?;

    let mut model = Model::init(cfg.model_config(), cfg.seed);
    let ctx = cfg.penalty_context();
    let mut adam = AdamState::new(&model.params);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = String::new();
    let mut step_no = 0usize;

    for epoch in 0..cfg.epochs {
        let batches = dataset::make_batches(
            frames.len(),
            cfg.batch_size.min(frames.len().max(2)),
            cfg.seed.wrapping_add(epoch as u64),
        )?;
        for idx in &batches {
            let refs: Vec<&Frame> = idx.iter().map(|&i| &frames[i]).collect();
            let batch = Batch::from_frames(&refs, &model.config);
            let z = model.draw_noise(batch.len(), &mut noise_rng);
            let mut tape = Tape::new();
            let leaves = model.leaves(&mut tape);
            let nodes = batch.input_nodes(&mut tape);
            let out = model.forward(&mut tape, &leaves, nodes, Mode::Train, Some(&z));
            let (loss, breakdown) = total_loss(&mut tape, &out, &batch, &cfg.weights, &ctx)?;
            let grads = tape.backward(loss).expect("fresh tape per step");
            let gvec: Vec<Tensor> = leaves
                .iter()
                .zip(&model.params)
                .map(|(id, p)| grads.get_or_zeros(*id, p.shape()))
                .collect();
            adam_step(&mut model.params, &gvec, &mut adam, cfg.lr);
            let _ = writeln!(log, "step={step_no} epoch={epoch} {}", breakdown.log_line());
            step_no += 1;
        }
    }

    std::fs::write(cfg.out_dir.join("train.log"), log)?;
    let ckpt = cfg.out_dir.join("model.ckpt");
    model.save(&ckpt)?;
    Ok(ckpt)
}

/// How the camera feed is tampered with during closed-loop evaluation.
pub enum AttackMode<'a> {
    Clean,
    Fgsm(f64),
    Dots(&'a DotPattern),
}

fn light_one_hot(ctx: &townsim::RuleContext) -> [f64; 4] {
    match (ctx.light_color, ctx.y_stop.is_finite()) {
        (Some(LightColor::Red), true) => [1.0, 0.0, 0.0, 0.0],
        (Some(LightColor::Yellow), true) => [0.0, 1.0, 0.0, 0.0],
        (Some(LightColor::Green), true) => [0.0, 0.0, 1.0, 0.0],
        _ => [0.0, 0.0, 0.0, 1.0],
    }
}

/// Run one scenario closed-loop under the model and count infractions.
pub fn run_route(
    scenario: &ScenarioConfig,
    model: &Model,
    cfg: &RunConfig,
    seed: u64,
    attack: &AttackMode,
) -> Result<RouteResult, RunnerError> {
    let mut state = SimState::init(scenario, seed);
    let mut prev_vehicle = state.ego;
    let pid_params = PidParams {
        dt: scenario.dt,
        ..PidParams::default()
    };
    let mut pid_state = PidState::default();
    let mut counts = InfractionCounts::default();
    let penalty_ctx = cfg.penalty_context();

    let predict = |model: &Model, batch: &Batch| -> Vec<Waypoint> {
        let mut tape = Tape::new();
        let params = model.frozen(&mut tape);
        let nodes = batch.input_nodes(&mut tape);
        let out = model.forward(&mut tape, &params, nodes, Mode::Eval, None);
        out.waypoints
            .iter()
            .map(|w| {
                let v = tape.value(*w);
                Waypoint::new(v.data()[0], v.data()[1])
            })
            .collect()
    };

    let steps = (scenario.time_limit / scenario.dt).ceil() as usize;
    for _ in 0..steps {
        let rc = rule_context(scenario, &state);
        let mut frame = Frame {
            camera: sensors::render_camera(scenario, &state),
            lidar: sensors::render_lidar(scenario, &state),
            front_seg: sensors::render_front_seg_gt(scenario, &state),
            td_seg: sensors::render_topdown_seg_gt(scenario, &state),
            meas: sensors::measurement_vec(&prev_vehicle),
            light_state: light_one_hot(&rc),
            stop_sign_flag: if rc.is_stop_sign { 1.0 } else { 0.0 },
            is_red: rc.is_red,
            y_stop: rc.y_stop,
            delta_heading: rc.delta_heading,
            goal: expert::goal_in_ego(scenario, &state),
            waypoints: [[0.0; 2]; WAYPOINT_HORIZON],
        };

        let waypoints = match attack {
            AttackMode::Clean => {
                let batch = Batch::from_frames(&[&frame], &model.config);
                predict(model, &batch)
            }
            AttackMode::Dots(pattern) => {
                frame.camera = attacks::apply_dots(&frame.camera, pattern);
                let batch = Batch::from_frames(&[&frame], &model.config);
                predict(model, &batch)
            }
            AttackMode::Fgsm(eps) => {
                // no expert labels exist closed-loop; the clean prediction
                // stands in as the waypoint target, so the attack gradient
                // flows through the auxiliary and penalty terms
                let clean_batch = Batch::from_frames(&[&frame], &model.config);
                let clean = predict(model, &clean_batch);
                for (slot, w) in frame.waypoints.iter_mut().zip(&clean) {
                    *slot = [w.x, w.y];
                }
                let mut batch = Batch::from_frames(&[&frame], &model.config);
                batch.camera = attacks::fgsm(model, &batch, &cfg.weights, &penalty_ctx, *eps);
                predict(model, &batch)
            }
        };

        prev_vehicle = state.ego;
        let (controls, next_pid) = pid_control(&waypoints, state.ego.speed, &pid_params, pid_state);
        pid_state = next_pid;
        let (next, events) = townsim::step(scenario, &state, controls, scenario.dt)?;
        for e in &events {
            counts.add(e.kind);
        }
        state = next;
        if townsim::route_progress(&state, &scenario.route) >= 0.999 {
            break;
        }
    }

    Ok(RouteResult::new(
        townsim::route_progress(&state, &scenario.route).min(1.0),
        counts,
    ))
}

/// Closed-loop benchmark over the scenario pack and every eval seed.
/// The report is plain text, one machine-readable record per line.
pub fn evaluate(
    cfg: &RunConfig,
    model: &Model,
    attack: &AttackMode,
    kind: &str,
) -> Result<String, RunnerError> {
    cfg.validate()?;
    let scenarios = load_scenario_pack(&cfg.scenario_dir)?;
    let mut out = format!("report/1 kind={kind}\n");
    let mut ds_runs = Vec::new();
    let mut rc_runs = Vec::new();
    let mut is_runs = Vec::new();
    for &seed in &cfg.eval_seeds {
        let mut results = Vec::with_capacity(scenarios.len());
        for sc in &scenarios {
            let r = run_route(sc, model, cfg, seed, attack)?;
            let _ = writeln!(
                out,
                "route scenario={} seed={} completion={:.6} n_ped={} n_veh={} n_stat={} n_red={} n_stop={} is={:.6}",
                sc.name,
                seed,
                r.completion,
                r.counts.n_ped,
                r.counts.n_veh,
                r.counts.n_stat,
                r.counts.n_red,
                r.counts.n_stop,
                infraction_score(&r.counts)
            );
            results.push(r);
        }
        let (ds, rc, is) = (
            driving_score(&results),
            route_completion(&results),
            mean_infraction_score(&results),
        );
        let _ = writeln!(out, "seed seed={seed} ds={ds:.6} rc={rc:.6} is={is:.6}");
        ds_runs.push(ds);
        rc_runs.push(rc);
        is_runs.push(is);
    }
    let (dm, dsd) = mean_std(&ds_runs);
    let (rm, rsd) = mean_std(&rc_runs);
    let (im, isd) = mean_std(&is_runs);
    let _ = writeln!(
        out,
        "aggregate ds_mean={dm:.6} ds_std={dsd:.6} rc_mean={rm:.6} rc_std={rsd:.6} is_mean={im:.6} is_std={isd:.6}"
    );
    Ok(out)
}

/// Evaluate a checkpoint clean; writes `eval_report.txt` into `out_dir`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<String, RunnerError> {
    let model = Model::load(checkpoint, cfg.model_config())?;
    let report = evaluate(cfg, &model, &AttackMode::Clean, "clean")?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("eval_report.txt"), &report)?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.serialize())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Dot,
}

/// Evaluate a checkpoint under attack; dots are trained on the collected
/// dataset first and saved next to the report.
pub fn cmd_attack(
    cfg: &RunConfig,
    checkpoint: &Path,
    kind: AttackKind,
) -> Result<String, RunnerError> {
    let model = Model::load(checkpoint, cfg.model_config())?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let report = match kind {
        AttackKind::Fgsm => evaluate(cfg, &model, &AttackMode::Fgsm(cfg.attack_eps), "fgsm")?,
        AttackKind::Dot => {
            let frames = load_frames(&cfg.data_dir)?;
            let ctx = cfg.penalty_context();
            let idx_batches = dataset::make_batches(
                frames.len(),
                cfg.batch_size.min(frames.len().max(2)),
                cfg.seed,
            )?;
            let batches: Vec<Batch> = idx_batches
                .iter()
                .take(4)
                .map(|idx| {
                    let refs: Vec<&Frame> = idx.iter().map(|&i| &frames[i]).collect();
                    Batch::from_frames(&refs, &model.config)
                })
                .collect();
            let pattern = attacks::dot_attack_train(
                &model,
                &batches,
                &cfg.weights,
                &ctx,
                cfg.dot_steps,
                cfg.dot_lr,
            );
            pattern.save(&cfg.out_dir.join("dots.bin"))?;
            evaluate(cfg, &model, &AttackMode::Dots(&pattern), "dot")?
        }
    };
    let name = match kind {
        AttackKind::Fgsm => "fgsm_report.txt",
        AttackKind::Dot => "dot_report.txt",
    };
    std::fs::write(cfg.out_dir.join(name), &report)?;
    Ok(report)
}

/// Recompute aggregate scores from saved report files; each file is one run.
pub fn cmd_score(paths: &[PathBuf]) -> Result<String, RunnerError> {
    let mut ds_runs = Vec::new();
    let mut rc_runs = Vec::new();
    let mut is_runs = Vec::new();
    let mut out = String::from("score/1\n");
    for path in paths {
        let text = std::fs::read_to_string(path)?;
        let results = parse_route_lines(&text)?;
        if results.is_empty() {
            return Err(RunnerError::BadReport {
                line: 0,
                msg: format!("{} contains no route records", path.display()),
            });
        }
        let (ds, rc, is) = (
            driving_score(&results),
            route_completion(&results),
            mean_infraction_score(&results),
        );
        let _ = writeln!(
            out,
            "run file={} routes={} ds={ds:.6} rc={rc:.6} is={is:.6}",
            path.display(),
            results.len()
        );
        ds_runs.push(ds);
        rc_runs.push(rc);
        is_runs.push(is);
    }
    let (dm, dsd) = mean_std(&ds_runs);
    let (rm, rsd) = mean_std(&rc_runs);
    let (im, isd) = mean_std(&is_runs);
    let _ = writeln!(
        out,
        "aggregate ds_mean={dm:.6} ds_std={dsd:.6} rc_mean={rm:.6} rc_std={rsd:.6} is_mean={im:.6} is_std={isd:.6}"
    );
    Ok(out)
}

/// Parse `route ...` records out of a report.
pub fn parse_route_lines(text: &str) -> Result<Vec<RouteResult>, RunnerError> {
    let mut results = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.strip_prefix("route ") else {
            continue;
        };
        let mut completion = None;
        let mut counts = InfractionCounts::default();
        for field in rest.split_whitespace() {
            let Some((k, v)) = field.split_once('=') else {
                continue;
            };
            let bad = |msg: String| RunnerError::BadReport { line: i + 1, msg };
            match k {
                "completion" => {
                    completion = Some(
                        v.parse::<f64>()
                            .map_err(|_| bad(format!("bad completion '{v}'")))?,
                    )
                }
                "n_ped" => counts.n_ped = v.parse().map_err(|_| bad(format!("bad n_ped '{v}'")))?,
                "n_veh" => counts.n_veh = v.parse().map_err(|_| bad(format!("bad n_veh '{v}'")))?,
                "n_stat" => {
                    counts.n_stat = v.parse().map_err(|_| bad(format!("bad n_stat '{v}'")))?
                }
                "n_red" => counts.n_red = v.parse().map_err(|_| bad(format!("bad n_red '{v}'")))?,
                "n_stop" => {
                    counts.n_stop = v.parse().map_err(|_| bad(format!("bad n_stop '{v}'")))?
                }
                _ => {}
            }
        }
        let completion = completion.ok_or(RunnerError::BadReport {
            line: i + 1,
            msg: "route record lacks completion".to_string(),
        })?;
        results.push(RouteResult::new(completion.clamp(0.0, 1.0), counts));
    }
    Ok(results)
}
