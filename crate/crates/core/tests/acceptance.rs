//! End-to-end acceptance suite.
//!
//! Each test exercises one release gate and prints exactly one
//! `criterion N (<name>): PASS|FAIL` line. The heavyweight gates (the
//! penalty-vs-no-penalty comparison, the FGSM evaluation, and the report
//! determinism check) share one lazily built fixture: a collected dataset
//! plus six trained checkpoints (penalty and no-penalty arms, three seeds
//! each) over the standard scenario pack.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use towndrive::autodiff::{grad_check, Tape, Tensor};
use towndrive::config::RunConfig;
use towndrive::container::Container;
use towndrive::dataset::{read_episode, write_episode, Frame, EPISODE_MAGIC};
use towndrive::expert::{self, ExpertConfig};
use towndrive::losses::{
    curvature_speed_penalty_value, estimated_speed_value, red_light_penalty_value,
    stop_sign_penalty_value, sym_kl_value, total_loss, PenaltyContext,
};
use towndrive::metrics::{driving_score, infraction_score, InfractionCounts, RouteResult};
use towndrive::model::{Batch, Mode, Model};
use towndrive::runner::{
    cmd_collect, cmd_eval, cmd_train, evaluate, load_frames, load_scenario_pack, AttackMode,
};
use towndrive::sensors::{BEV_C, BEV_H, BEV_W, CAM_C, CAM_H, CAM_W, SEG_C};
use towndrive::townsim::InfractionKind;

fn criterion<F: FnOnce()>(n: u32, name: &str, body: F) {
    let t0 = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let verdict = if result.is_ok() { "PASS" } else { "FAIL" };
    println!(
        "criterion {n} ({name}): {verdict} [{:.1}s]",
        t0.elapsed().as_secs_f64()
    );
    if let Err(payload) = result {
        resume_unwind(payload);
    }
}

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

// ---------------------------------------------------------------------------
// Shared trained fixture
// ---------------------------------------------------------------------------

struct Arm {
    /// (checkpoint path, clean evaluation report) per seed.
    runs: Vec<(PathBuf, String)>,
}

struct Fixture {
    _dir: tempfile::TempDir,
    data_dir: PathBuf,
    penalty: Arm,
    no_penalty: Arm,
    /// Wall-clock seconds spent collecting, training, and evaluating.
    elapsed: f64,
}

/// Sum of red-light and stop-sign infractions plus the aggregate mean DS
/// parsed from an evaluation report.
fn report_viols_and_ds(report: &str) -> (usize, f64) {
    let mut viols = 0usize;
    let mut ds = f64::NAN;
    for line in report.lines() {
        if line.starts_with("route ") {
            for tok in line.split_whitespace() {
                if let Some(v) = tok.strip_prefix("n_red=") {
                    viols += v.parse::<usize>().unwrap();
                }
                if let Some(v) = tok.strip_prefix("n_stop=") {
                    viols += v.parse::<usize>().unwrap();
                }
            }
        } else if line.starts_with("aggregate ") {
            ds = line
                .split_whitespace()
                .find_map(|t| t.strip_prefix("ds_mean="))
                .unwrap()
                .parse()
                .unwrap();
        }
    }
    assert!(ds.is_finite(), "report missing aggregate line");
    (viols, ds)
}

fn run_config(data_dir: &Path, out_dir: &Path, seed: u64, penalties_on: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scenario_dir = scenario_dir();
    cfg.data_dir = data_dir.to_path_buf();
    cfg.out_dir = out_dir.to_path_buf();
    cfg.seed = seed;
    cfg.epochs = 8;
    cfg.batch_size = 16;
    if !penalties_on {
        cfg.weights.lambda_red = 0.0;
        cfg.weights.lambda_stop = 0.0;
        cfg.weights.lambda_speed = 0.0;
    }
    cfg
}

fn train_arm(data_dir: &Path, root: &Path, label: &str, penalties_on: bool) -> Arm {
    let mut runs = Vec::new();
    for seed in [0u64, 1, 5] {
        let out = root.join(format!("{label}_{seed}"));
        let cfg = run_config(data_dir, &out, seed, penalties_on);
        let ckpt = cmd_train(&cfg).expect("training failed");
        let model = Model::load(&ckpt, cfg.model_config()).expect("checkpoint load failed");
        let report = evaluate(&cfg, &model, &AttackMode::Clean, "clean").expect("eval failed");
        runs.push((ckpt, report));
    }
    Arm { runs }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let t0 = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let data_dir = dir.path().join("data");
        let collect_cfg = run_config(&data_dir, &dir.path().join("base"), 0, true);
        let report = cmd_collect(&collect_cfg).expect("collection failed");
        assert!(report.rejected.is_empty(), "expert episodes were rejected");
        let penalty = train_arm(&data_dir, dir.path(), "penalty", true);
        let no_penalty = train_arm(&data_dir, dir.path(), "no_penalty", false);
        Fixture {
            _dir: dir,
            data_dir,

            penalty,
            no_penalty,
            elapsed: t0.elapsed().as_secs_f64(),
        }
    })
}

// ---------------------------------------------------------------------------
// Criterion 1: penalty semantics
// ---------------------------------------------------------------------------

struct Lcg(u64);

/// Tiny standalone generator so the semantics sweep does not share state
/// with anything else.
impl Lcg {
    fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
    fn flag(&mut self) -> f64 {
        if self.next_f64() < 0.5 {
            1.0
        } else {
            0.0
        }
    }
}

#[test]
fn criterion_1_penalty_semantics() {
    criterion(1, "penalty semantics", || {
        let t0 = Instant::now();
        let mut rng = Lcg(0x5eed);
        for i in 0..10_000 {
            let mut wps = [[0.0f64; 2]; 4];
            for w in &mut wps {
                w[0] = rng.uniform(-20.0, 20.0);
                w[1] = rng.uniform(-20.0, 20.0);
            }
            // every fourth sample pins a waypoint exactly on the stop line
            // (boundary: constraint holds, penalty must be exactly zero)
            let y_stop = rng.uniform(-5.0, 25.0);
            if i % 4 == 0 {
                wps[i % 3][1] = y_stop;
            }
            let ctx = PenaltyContext {
                is_red: rng.flag(),
                y_stop,
                is_stop_sign: rng.flag(),
                // every fifth sample drives dead straight
                delta_heading: if i % 5 == 0 {
                    0.0
                } else {
                    rng.uniform(-std::f64::consts::PI, std::f64::consts::PI)
                },
                ..PenaltyContext::default()
            };
            let v = estimated_speed_value(&wps, ctx.dt);

            let red = red_light_penalty_value(&wps, &ctx);
            assert!(red >= 0.0);
            let red_holds = ctx.is_red == 0.0 || wps.iter().all(|w| w[1] <= ctx.y_stop);
            assert_eq!(red == 0.0, red_holds, "red semantics at sample {i}");

            let stop = stop_sign_penalty_value(&wps, &ctx);
            assert!(stop >= 0.0);
            let stop_holds = ctx.is_stop_sign == 0.0 || v <= ctx.eps_v;
            assert_eq!(stop == 0.0, stop_holds, "stop semantics at sample {i}");

            let curve = curvature_speed_penalty_value(&wps, &ctx);
            assert!(curve >= 0.0);
            let curve_holds = ctx.delta_heading == 0.0 || v <= ctx.v_lb;
            assert_eq!(curve == 0.0, curve_holds, "curve semantics at sample {i}");
        }
        assert!(
            t0.elapsed().as_secs_f64() < 5.0,
            "semantics sweep took {:.1}s",
            t0.elapsed().as_secs_f64()
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient oracle through the full model
// ---------------------------------------------------------------------------

/// A frame with random-but-plausible contents that keeps every loss term
/// active: red light ahead, unsatisfied stop sign, curved route.
fn synthetic_frame(rng: &mut ChaCha8Rng) -> Frame {
    use rand::Rng;
    let rand_tensor = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect())
    };
    let one_hot_seg = |rng: &mut ChaCha8Rng, h: usize, w: usize| {
        let mut data = vec![0.0; SEG_C * h * w];
        for i in 0..h * w {
            let c = (rng.random::<f64>() * SEG_C as f64) as usize % SEG_C;
            data[c * h * w + i] = 1.0;
        }
        Tensor::new(vec![SEG_C, h, w], data)
    };
    let mut wps = [[0.0f64; 2]; 4];
    for w in &mut wps {
        w[0] = rng.random::<f64>() * 4.0 - 2.0;
        w[1] = rng.random::<f64>() * 8.0;
    }
    Frame {
        camera: rand_tensor(rng, vec![CAM_C, CAM_H, CAM_W]),
        lidar: rand_tensor(rng, vec![BEV_C, BEV_H, BEV_W]),
        front_seg: one_hot_seg(rng, CAM_H, CAM_W),
        td_seg: one_hot_seg(rng, BEV_H, BEV_W),
        meas: rand_tensor(rng, vec![4]),
        light_state: [1.0, 0.0, 0.0, 0.0],
        stop_sign_flag: 1.0,
        is_red: true,
        y_stop: 0.05,
        delta_heading: 0.4,
        goal: (
            rng.random::<f64>() * 4.0 - 2.0,
            30.0 + rng.random::<f64>() * 20.0,
        ),
        waypoints: wps,
    }
}

#[test]
fn criterion_2_gradient_oracle() {
    criterion(2, "gradient oracle", || {
        use rand::Rng;
        let t0 = Instant::now();
        let cfg = RunConfig::default();
        let model = Model::init(cfg.model_config(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let frames = [synthetic_frame(&mut rng), synthetic_frame(&mut rng)];
        let batch = Batch::from_frames(&[&frames[0], &frames[1]], &model.config);
        let noise = model.draw_noise(2, &mut rng);
        let ctx = cfg.penalty_context();
        let weights = cfg.weights.clone();

        let mut max_err = 0.0f64;
        for _ in 0..20 {
            let ti = rng.random_range(0..model.params.len());
            let ei = rng.random_range(0..model.params[ti].len());
            let x0 = model.params[ti].data()[ei];

            let f = |tape: &mut Tape, x: towndrive::autodiff::TensorId| {
                let params: Vec<_> = model
                    .params
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        if i != ti {
                            return tape.constant(p.clone());
                        }
                        // substitute the probed scalar into its slot via a
                        // one-hot mask so only that coordinate is a leaf
                        let mut zeroed = p.clone();
                        zeroed.data_mut()[ei] = 0.0;
                        let mut hot = vec![0.0; p.len()];
                        hot[ei] = 1.0;
                        let base = tape.constant(zeroed);
                        let mask = tape.constant(Tensor::new(p.shape().to_vec(), hot));
                        let contrib = tape.scale_by_scalar(mask, x);
                        tape.add(base, contrib)
                    })
                    .collect();
                let nodes = batch.input_nodes(tape);
                let out = model.forward(tape, &params, nodes, Mode::Train, Some(&noise));
                total_loss(tape, &out, &batch, &weights, &ctx)
                    .expect("loss")
                    .0
            };
            let err = grad_check(f, &Tensor::scalar(x0), 1e-5);
            max_err = max_err.max(err);
        }
        assert!(max_err <= 1e-4, "max relative gradient error {max_err:.3e}");
        assert!(
            t0.elapsed().as_secs_f64() < 120.0,
            "gradient oracle took {:.1}s",
            t0.elapsed().as_secs_f64()
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 3: metrics oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_metrics_oracle() {
    criterion(3, "metrics oracle", || {
        let mut rng = Lcg(0x3e7);
        // brute-force factor products by repeated multiplication
        let brute_is = |c: &InfractionCounts| {
            let mut s = 1.0f64;
            for _ in 0..c.n_ped {
                s *= 0.5;
            }
            for _ in 0..c.n_veh {
                s *= 0.60;
            }
            for _ in 0..c.n_stat {
                s *= 0.65;
            }
            for _ in 0..c.n_red {
                s *= 0.7;
            }
            for _ in 0..c.n_stop {
                s *= 0.8;
            }
            s
        };
        for i in 0..50 {
            let counts = InfractionCounts {
                n_ped: (rng.next_f64() * 4.0) as u32,
                n_veh: (rng.next_f64() * 4.0) as u32,
                n_stat: (rng.next_f64() * 4.0) as u32,
                n_red: (rng.next_f64() * 4.0) as u32,
                n_stop: (rng.next_f64() * 4.0) as u32,
            };
            let got = infraction_score(&counts);
            let want = brute_is(&counts);
            assert!(
                (got - want).abs() <= 1e-12,
                "IS mismatch at sample {i}: {got} vs {want}"
            );

            let n_routes = 1 + (rng.next_f64() * 5.0) as usize;
            let results: Vec<RouteResult> = (0..n_routes)
                .map(|_| {
                    let c = InfractionCounts {
                        n_ped: (rng.next_f64() * 3.0) as u32,
                        n_veh: (rng.next_f64() * 3.0) as u32,
                        n_stat: (rng.next_f64() * 3.0) as u32,
                        n_red: (rng.next_f64() * 3.0) as u32,
                        n_stop: (rng.next_f64() * 3.0) as u32,
                    };
                    RouteResult::new(rng.next_f64(), c)
                })
                .collect();
            let got_ds = driving_score(&results);
            let want_ds = results
                .iter()
                .map(|r| r.completion * brute_is(&r.counts) * 100.0)
                .sum::<f64>()
                / n_routes as f64;
            assert!(
                (got_ds - want_ds).abs() <= 1e-12,
                "DS mismatch at sample {i}: {got_ds} vs {want_ds}"
            );
        }

        let mut single_red = InfractionCounts::default();
        single_red.add(InfractionKind::RedLight);
        assert_eq!(infraction_score(&single_red), 0.7);
    });
}

// ---------------------------------------------------------------------------
// Criterion 4: symmetric KL suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_sym_kl_suite() {
    criterion(4, "symmetric KL suite", || {
        let mut rng = Lcg(0x4b1d);
        for i in 0..1_000 {
            let dim = 1 + (rng.next_f64() * 8.0) as usize;
            let mu1: Vec<f64> = (0..dim).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let mu2: Vec<f64> = (0..dim).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let v1: Vec<f64> = (0..dim).map(|_| rng.uniform(0.05, 4.0)).collect();
            let v2: Vec<f64> = (0..dim).map(|_| rng.uniform(0.05, 4.0)).collect();

            let ab = sym_kl_value(&mu1, &v1, &mu2, &v2);
            let ba = sym_kl_value(&mu2, &v2, &mu1, &v1);
            assert!((ab - ba).abs() <= 1e-10, "symmetry broken at sample {i}");
            assert!(ab >= 0.0, "negative divergence at sample {i}");
            assert!(ab > 0.0, "distinct gaussians must diverge at sample {i}");
            let self_div = sym_kl_value(&mu1, &v1, &mu1, &v1);
            assert!(
                self_div.abs() <= 1e-10,
                "self-divergence {self_div} at sample {i}"
            );
        }
        let unit_gap = sym_kl_value(&[0.0], &[1.0], &[1.0], &[1.0]);
        assert!((unit_gap - 0.5).abs() <= 1e-12, "unit-gap case {unit_gap}");
    });
}

// ---------------------------------------------------------------------------
// Criterion 5: directional penalty claim
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_directional_penalty_claim() {
    criterion(5, "directional penalty claim", || {
        let fx = fixture();
        let mut pen_viols = 0usize;
        let mut nopen_viols = 0usize;
        let mut pen_ds = 0.0;
        let mut nopen_ds = 0.0;
        for (_, report) in &fx.penalty.runs {
            let (v, ds) = report_viols_and_ds(report);
            pen_viols += v;
            pen_ds += ds;
        }
        for (_, report) in &fx.no_penalty.runs {
            let (v, ds) = report_viols_and_ds(report);
            nopen_viols += v;
            nopen_ds += ds;
        }
        pen_ds /= fx.penalty.runs.len() as f64;
        nopen_ds /= fx.no_penalty.runs.len() as f64;
        assert!(
            2 * pen_viols <= nopen_viols,
            "penalty arm {pen_viols} vs no-penalty {nopen_viols} red+stop infractions"
        );
        assert!(
            pen_ds > nopen_ds,
            "penalty DS {pen_ds:.2} not above no-penalty DS {nopen_ds:.2}"
        );
        assert!(
            fx.elapsed < 1800.0,
            "fixture build took {:.0}s (budget 1800s)",
            fx.elapsed
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 6: cross-flow invariant
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_cross_flow_invariant() {
    criterion(6, "cross-flow invariant", || {
        let cfg = RunConfig::default();
        let model = Model::init(cfg.model_config(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = [synthetic_frame(&mut rng), synthetic_frame(&mut rng)];
        let mut batch = Batch::from_frames(&[&frames[0], &frames[1]], &model.config);

        let front_bits = |batch: &Batch| -> Vec<u64> {
            let mut tape = Tape::new();
            let params = model.frozen(&mut tape);
            let nodes = batch.input_nodes(&mut tape);
            let out = model.forward(&mut tape, &params, nodes, Mode::Eval, None);
            tape.value(out.front_seg_logits)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };

        let before = front_bits(&batch);
        for (i, v) in batch.camera.data_mut().iter_mut().enumerate() {
            *v = (*v + 0.17 * ((i % 7) as f64 + 1.0)).rem_euclid(1.0);
        }
        let after = front_bits(&batch);
        assert_eq!(
            before, after,
            "front segmentation logits changed when only the camera moved"
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 7: FGSM bound and directional degradation
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_fgsm_bound() {
    criterion(7, "FGSM bound", || {
        let fx = fixture();
        let eps = 0.01;
        let (ckpt, clean_report) = &fx.penalty.runs[1];
        let cfg = run_config(&fx.data_dir, ckpt.parent().unwrap(), 1, true);
        let model = Model::load(ckpt, cfg.model_config()).expect("checkpoint");
        let frames = load_frames(&fx.data_dir).expect("frames");
        assert!(frames.len() >= 100, "need at least 100 frames");
        let ctx = cfg.penalty_context();

        let mut eq_at_bound = 0usize;
        let mut unclamped_moving = 0usize;
        for f in frames.iter().take(100) {
            let batch = Batch::from_frames(&[f], &model.config);
            let adv = towndrive::attacks::fgsm(&model, &batch, &cfg.weights, &ctx, eps);
            for (x, xp) in batch.camera.data().iter().zip(adv.data()) {
                let d = (xp - x).abs();
                assert!(d <= eps + 1e-15, "L-infinity bound violated: {d}");
                // unclamped pixel with nonzero gradient: the step must land
                // exactly on the epsilon ball surface
                if d > 0.0 && *x >= eps && *x <= 1.0 - eps {
                    unclamped_moving += 1;
                    if (d - eps).abs() <= 1e-12 {
                        eq_at_bound += 1;
                    }
                }
            }
        }
        assert!(unclamped_moving > 0, "attack never moved a pixel");
        let frac = eq_at_bound as f64 / unclamped_moving as f64;
        assert!(
            frac >= 0.99,
            "only {frac:.4} of moving pixels hit the bound"
        );

        let attacked_report =
            evaluate(&cfg, &model, &AttackMode::Fgsm(eps), "fgsm").expect("attacked eval");
        let (_, clean_ds) = report_viols_and_ds(clean_report);
        let (_, attacked_ds) = report_viols_and_ds(&attacked_report);
        assert!(
            attacked_ds < clean_ds,
            "attacked DS {attacked_ds:.2} not below clean DS {clean_ds:.2}"
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_determinism() {
    criterion(8, "determinism", || {
        let fx = fixture();
        let (ckpt, _) = &fx.penalty.runs[0];
        let cfg = run_config(&fx.data_dir, ckpt.parent().unwrap(), 0, true);
        let a = cmd_eval(&cfg, ckpt).expect("first eval");
        let b = cmd_eval(&cfg, ckpt).expect("second eval");
        assert_eq!(a.into_bytes(), b.into_bytes(), "evaluation reports differ");

        // episode files roundtrip bit-exactly through read + write
        let ep_path = std::fs::read_dir(&fx.data_dir)
            .unwrap()
            .filter_map(|e| e.ok().map(|e| e.path()))
            .find(|p| p.extension().is_some_and(|e| e == "ep"))
            .expect("an episode file");
        let original = std::fs::read(&ep_path).unwrap();
        let container = Container::read(&ep_path, EPISODE_MAGIC).unwrap();
        let dt: f64 = container.meta_value("dt").unwrap().parse().unwrap();
        let hash = u64::from_str_radix(container.meta_value("expert_hash").unwrap(), 16).unwrap();
        let (name, frames) = read_episode(&ep_path).unwrap();
        let copy_path = fx.data_dir.join("roundtrip_copy.bin");
        write_episode(&copy_path, &name, dt, hash, &frames).unwrap();
        let copy = std::fs::read(&copy_path).unwrap();
        std::fs::remove_file(&copy_path).unwrap();
        assert_eq!(original, copy, "episode file did not roundtrip bit-exactly");
    });
}

// ---------------------------------------------------------------------------
// Criterion 9: expert compliance
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_expert_compliance() {
    criterion(9, "expert compliance", || {
        let scenarios = load_scenario_pack(&scenario_dir()).expect("scenario pack");
        assert_eq!(scenarios.len(), 10, "standard pack has 10 routes");
        let expert_cfg = ExpertConfig::default();
        let mut completions = Vec::new();
        for sc in &scenarios {
            let ep = expert::collect_episode(sc, &expert_cfg, 0);
            for ev in &ep.events {
                assert!(
                    !matches!(ev.kind, InfractionKind::RedLight | InfractionKind::StopSign),
                    "expert committed {:?} on {}",
                    ev.kind,
                    sc.name
                );
            }
            completions.push(ep.completion);
        }
        let mean = completions.iter().sum::<f64>() / completions.len() as f64;
        assert!(mean >= 0.95, "mean completion {mean:.3}");
    });
}
