//! Training objectives: the L1 waypoint loss, segmentation / traffic-light /
//! stop-sign cross-entropies, the contrastive embedding-alignment term, and
//! the three rule penalties combined through fixed Lagrange multipliers.
//!
//! Each penalty has two faces: a plain-`f64` evaluator that defines the exact
//! semantics (zero iff the rule constraint holds), and a tape version used in
//! training whose value is tested to match the scalar one.

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::model::{Batch, ModelOutputs};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

/// Per-frame rule facts consumed by the penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyContext {
    /// 1.0 when approaching a red light, else 0.0.
    pub is_red: f64,
    /// Forward distance to the stop line in the ego frame (meters).
    pub y_stop: f64,
    /// 1.0 when inside an unsatisfied stop-sign zone, else 0.0.
    pub is_stop_sign: f64,
    /// Upcoming route heading change (radians).
    pub delta_heading: f64,
    pub dt: f64,
    pub eps_v: f64,
    pub v_lb: f64,
    /// Per-waypoint weights, length T, summing to 1.
    pub c: Vec<f64>,
}

impl Default for PenaltyContext {
    fn default() -> Self {
        Self {
            is_red: 0.0,
            y_stop: f64::INFINITY,
            is_stop_sign: 0.0,
            delta_heading: 0.0,
            dt: 0.5,
            eps_v: 0.5,
            v_lb: 2.0,
            c: vec![0.25; 4],
        }
    }
}

impl PenaltyContext {
    pub fn validate(&self) {
        assert!(self.dt > 0.0, "dt must be positive");
        assert!(self.eps_v >= 0.0, "eps_v must be non-negative");
        assert!(self.v_lb >= 0.0, "v_lb must be non-negative");
        let s: f64 = self.c.iter().sum();
        assert!(
            (s - 1.0).abs() < 1e-9,
            "waypoint weights must sum to 1, got {s}"
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub eta_front: f64,
    pub eta_td: f64,
    pub eta_light: f64,
    pub eta_stop: f64,
    pub eta_align: f64,
    pub lambda_red: f64,
    pub lambda_stop: f64,
    pub lambda_speed: f64,
    /// Hinge margin for the contrastive alignment term.
    pub align_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta_front: 1.0,
            eta_td: 1.0,
            eta_light: 1.0,
            eta_stop: 1.0,
            eta_align: 1.0,
            lambda_red: 0.5,
            lambda_stop: 0.5,
            lambda_speed: 0.05,
            align_margin: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) {
        for (name, v) in [
            ("eta_front", self.eta_front),
            ("eta_td", self.eta_td),
            ("eta_light", self.eta_light),
            ("eta_stop", self.eta_stop),
            ("eta_align", self.eta_align),
            ("lambda_red", self.lambda_red),
            ("lambda_stop", self.lambda_stop),
            ("lambda_speed", self.lambda_speed),
            ("align_margin", self.align_margin),
        ] {
            assert!(v >= 0.0, "{name} must be non-negative, got {v}");
        }
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss term '{0}' is not finite")]
    NonFinite(&'static str),
}

// ---- exact scalar penalty semantics ----

/// Red-light penalty: 1_red · Σ_t c_t · max{0, ŷ_t − y_stop}.
pub fn red_light_penalty_value(waypoints: &[[f64; 2]], ctx: &PenaltyContext) -> f64 {
    if ctx.is_red == 0.0 {
        return 0.0;
    }
    waypoints
        .iter()
        .zip(&ctx.c)
        .map(|(w, c)| c * (w[1] - ctx.y_stop).max(0.0))
        .sum()
}

/// Speed implied by the first two waypoints: ‖ŵ0 − ŵ1‖ / Δt.
pub fn estimated_speed_value(waypoints: &[[f64; 2]], dt: f64) -> f64 {
    let dx = waypoints[0][0] - waypoints[1][0];
    let dy = waypoints[0][1] - waypoints[1][1];
    (dx * dx + dy * dy).sqrt() / dt
}

/// Stop-sign penalty: 1_stopsign · max{v − ε_v, 0}.
pub fn stop_sign_penalty_value(waypoints: &[[f64; 2]], ctx: &PenaltyContext) -> f64 {
    if ctx.is_stop_sign == 0.0 {
        return 0.0;
    }
    (estimated_speed_value(waypoints, ctx.dt) - ctx.eps_v).max(0.0)
}

/// Curvature speed penalty: sin(min(|Δδ|, π/2)) · max{v − v_lb, 0}.
pub fn curvature_speed_penalty_value(waypoints: &[[f64; 2]], ctx: &PenaltyContext) -> f64 {
    let bend = ctx.delta_heading.abs().min(FRAC_PI_2).sin();
    bend * (estimated_speed_value(waypoints, ctx.dt) - ctx.v_lb).max(0.0)
}

/// Closed-form symmetric KL between diagonal Gaussians given as (μ, σ²).
pub fn sym_kl_value(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> f64 {
    assert_eq!(mu1.len(), mu2.len());
    assert_eq!(var1.len(), var2.len());
    assert_eq!(mu1.len(), var1.len());
    let kl = |m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]| -> f64 {
        m1.iter()
            .zip(v1)
            .zip(m2.iter().zip(v2))
            .map(|((a, s1), (b, s2))| {
                assert!(*s1 > 0.0 && *s2 > 0.0, "variances must be positive");
                0.5 * (s2 / s1).ln() + (s1 + (a - b) * (a - b)) / (2.0 * s2) - 0.5
            })
            .sum()
    };
    0.5 * kl(mu1, var1, mu2, var2) + 0.5 * kl(mu2, var2, mu1, var1)
}

// ---- tape-based terms ----

/// Mean over the batch of Σ_t ‖ŵ_t − w_t‖_1.
pub fn policy_loss(tape: &mut Tape, pred: &[TensorId], truth: &[Tensor]) -> TensorId {
    assert_eq!(pred.len(), truth.len(), "waypoint horizon mismatch");
    let n = tape.shape(pred[0])[0] as f64;
    let mut acc = tape.constant_scalar(0.0);
    for (p, t) in pred.iter().zip(truth) {
        let tc = tape.constant(t.clone());
        let d = tape.l1_diff(*p, tc);
        acc = tape.add(acc, d);
    }
    tape.scale(acc, 1.0 / n)
}

/// KL(p‖q) for diagonal Gaussians parameterized by mean and log-variance.
fn kl_node(
    tape: &mut Tape,
    mu1: TensorId,
    lv1: TensorId,
    mu2: TensorId,
    lv2: TensorId,
) -> TensorId {
    let diff = tape.sub(mu1, mu2);
    let sq = tape.mul(diff, diff);
    let var1 = tape.exp(lv1);
    let num = tape.add(var1, sq);
    let neg_lv2 = tape.neg(lv2);
    let inv_var2 = tape.exp(neg_lv2);
    let frac_full = tape.mul(num, inv_var2);
    let frac = tape.scale(frac_full, 0.5);
    let lv_gap = tape.sub(lv2, lv1);
    let log_ratio = tape.scale(lv_gap, 0.5);
    let per_dim = tape.add(frac, log_ratio);
    let shifted = tape.add_const(per_dim, -0.5);
    tape.sum(shifted)
}

/// ½KL(p‖q) + ½KL(q‖p) on (mean, log-variance) tensors of equal shape.
pub fn sym_kl(
    tape: &mut Tape,
    mu1: TensorId,
    lv1: TensorId,
    mu2: TensorId,
    lv2: TensorId,
) -> TensorId {
    let a = kl_node(tape, mu1, lv1, mu2, lv2);
    let b = kl_node(tape, mu2, lv2, mu1, lv1);
    let s = tape.add(a, b);
    tape.scale(s, 0.5)
}

/// Contrastive alignment on two batches of Gaussians (N×d means/log-vars):
/// diagonal pairs are pulled together, off-diagonal pairs pushed beyond the
/// margin; mean over all N² pairs.
pub fn contrastive_align(
    tape: &mut Tape,
    mu1: TensorId,
    lv1: TensorId,
    mu2: TensorId,
    lv2: TensorId,
    margin: f64,
) -> TensorId {
    let n = tape.shape(mu1)[0];
    assert!(n >= 2, "contrastive alignment needs a batch of at least 2");
    assert_eq!(tape.shape(mu2)[0], n, "batch size mismatch");
    let mut acc = tape.constant_scalar(0.0);
    for i in 0..n {
        let m1 = tape.slice(mu1, 0, i, i + 1);
        let v1 = tape.slice(lv1, 0, i, i + 1);
        for j in 0..n {
            let m2 = tape.slice(mu2, 0, j, j + 1);
            let v2 = tape.slice(lv2, 0, j, j + 1);
            let d = sym_kl(tape, m1, v1, m2, v2);
            let term = if i == j {
                d
            } else {
                let neg = tape.scale(d, -1.0);
                let gap = tape.add_const(neg, margin);
                tape.max_with_scalar(gap, 0.0)
            };
            acc = tape.add(acc, term);
        }
    }
    tape.scale(acc, 1.0 / (n * n) as f64)
}

/// Batched red-light penalty, meaned over the batch. `is_red` and `y_stop`
/// are (N,1) constants; `c` weights the T waypoint overshoots.
pub fn red_light_penalty(
    tape: &mut Tape,
    pred: &[TensorId],
    is_red: TensorId,
    y_stop: TensorId,
    c: &[f64],
) -> TensorId {
    assert_eq!(pred.len(), c.len(), "weight count must match horizon");
    let n = tape.shape(pred[0])[0] as f64;
    let mut acc = tape.constant_scalar(0.0);
    for (p, w) in pred.iter().zip(c) {
        let y = tape.slice(*p, 1, 1, 2);
        let over = tape.sub(y, y_stop);
        let hinge = tape.max_with_scalar(over, 0.0);
        let gated = tape.mul(hinge, is_red);
        let summed = tape.sum(gated);
        let weighted = tape.scale(summed, *w);
        acc = tape.add(acc, weighted);
    }
    tape.scale(acc, 1.0 / n)
}

/// (N,1) speed implied by the first two predicted waypoints.
pub fn estimated_speed(tape: &mut Tape, w0: TensorId, w1: TensorId, dt: f64) -> TensorId {
    let d = tape.sub(w0, w1);
    let norm = tape.row_norm(d);
    tape.scale(norm, 1.0 / dt)
}

/// Batched stop-sign penalty, meaned over the batch.
pub fn stop_sign_penalty(
    tape: &mut Tape,
    pred: &[TensorId],
    flag: TensorId,
    dt: f64,
    eps_v: f64,
) -> TensorId {
    let n = tape.shape(pred[0])[0] as f64;
    let v = estimated_speed(tape, pred[0], pred[1], dt);
    let over = tape.add_const(v, -eps_v);
    let hinge = tape.max_with_scalar(over, 0.0);
    let gated = tape.mul(hinge, flag);
    let s = tape.sum(gated);
    tape.scale(s, 1.0 / n)
}

/// Batched curvature speed penalty; the sine of the (clamped, absolute)
/// heading change is data, not a differentiated quantity.
pub fn curvature_speed_penalty(
    tape: &mut Tape,
    pred: &[TensorId],
    delta_heading: &[f64],
    dt: f64,
    v_lb: f64,
) -> TensorId {
    let n = tape.shape(pred[0])[0];
    assert_eq!(delta_heading.len(), n, "heading count must match batch");
    let bend = Tensor::new(
        vec![n, 1],
        delta_heading
            .iter()
            .map(|d| d.abs().min(FRAC_PI_2).sin())
            .collect(),
    );
    let v = estimated_speed(tape, pred[0], pred[1], dt);
    let over = tape.add_const(v, -v_lb);
    let hinge = tape.max_with_scalar(over, 0.0);
    let bc = tape.constant(bend);
    let gated = tape.mul(hinge, bc);
    let s = tape.sum(gated);
    tape.scale(s, 1.0 / n as f64)
}

/// Cross-entropy of logits against a one-hot target along `axis`, meaned
/// over every non-class position.
pub fn cross_entropy(tape: &mut Tape, logits: TensorId, target: &Tensor, axis: usize) -> TensorId {
    let shape = tape.shape(logits).to_vec();
    assert_eq!(target.shape(), shape.as_slice(), "target shape mismatch");
    let positions = (target.len() / shape[axis]) as f64;
    let lsm = tape.log_softmax(logits, axis);
    let tc = tape.constant(target.clone());
    let picked = tape.mul(lsm, tc);
    let s = tape.sum(picked);
    tape.scale(s, -1.0 / positions)
}

/// Numerically stable binary cross-entropy with logits, meaned elementwise.
pub fn bce_with_logits(tape: &mut Tape, logits: TensorId, target: &Tensor) -> TensorId {
    let shape = tape.shape(logits).to_vec();
    assert_eq!(target.shape(), shape.as_slice(), "target shape mismatch");
    // max(x,0) − x·y + log(1 + exp(−|x|))
    let pos = tape.relu(logits);
    let nx = tape.neg(logits);
    let negpart = tape.relu(nx);
    let absx = tape.add(pos, negpart);
    let nabs = tape.neg(absx);
    let e = tape.exp(nabs);
    let e1 = tape.add_const(e, 1.0);
    let softplus = tape.log(e1);
    let tc = tape.constant(target.clone());
    let xy = tape.mul(logits, tc);
    let lin = tape.sub(pos, xy);
    let per = tape.add(lin, softplus);
    tape.mean(per)
}

/// Per-term values for logging and tests; all already weighted into `total`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub policy: f64,
    pub front_seg: f64,
    pub td_seg: f64,
    pub light: f64,
    pub stop: f64,
    pub align: f64,
    pub red_light: f64,
    pub stop_sign: f64,
    pub speed: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// One machine-readable `name=value` line for the training log.
    pub fn log_line(&self) -> String {
        format!(
            "policy={:.6e} front_seg={:.6e} td_seg={:.6e} light={:.6e} stop={:.6e} \
             align={:.6e} red_light={:.6e} stop_sign={:.6e} speed={:.6e} total={:.6e}",
            self.policy,
            self.front_seg,
            self.td_seg,
            self.light,
            self.stop,
            self.align,
            self.red_light,
            self.stop_sign,
            self.speed,
            self.total
        )
    }

    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.policy
            + w.eta_front * self.front_seg
            + w.eta_td * self.td_seg
            + w.eta_light * self.light
            + w.eta_stop * self.stop
            + w.eta_align * self.align
            + w.lambda_red * self.red_light
            + w.lambda_stop * self.stop_sign
            + w.lambda_speed * self.speed
    }
}

/// Full training objective on one batch: the waypoint loss plus weighted
/// auxiliary, alignment, and penalty terms. Returns the scalar node and the
/// per-term breakdown; any non-finite term aborts with its name.
pub fn total_loss(
    tape: &mut Tape,
    outputs: &ModelOutputs,
    batch: &Batch,
    weights: &LossWeights,
    ctx: &PenaltyContext,
) -> Result<(TensorId, LossBreakdown), LossError> {
    weights.validate();
    ctx.validate();

    let policy = policy_loss(tape, &outputs.waypoints, &batch.wp_truth);
    let front = cross_entropy(tape, outputs.front_seg_logits, &batch.front_seg_truth, 1);
    let td = cross_entropy(tape, outputs.td_seg_logits, &batch.td_seg_truth, 1);
    let light = cross_entropy(tape, outputs.light_logits, &batch.light_truth, 1);
    let stop = bce_with_logits(tape, outputs.stop_logit, &batch.stop_truth);
    // alignment contrasts frames against each other, so a singleton batch
    // (per-frame attack gradients) contributes nothing
    let align = if batch.len() >= 2 {
        contrastive_align(
            tape,
            outputs.img_mu,
            outputs.img_logvar,
            outputs.lidar_mu,
            outputs.lidar_logvar,
            weights.align_margin,
        )
    } else {
        tape.constant_scalar(0.0)
    };
    let is_red = tape.constant(batch.is_red.clone());
    let y_stop = tape.constant(batch.y_stop.clone());
    let flag = tape.constant(batch.stop_flag.clone());
    let red = red_light_penalty(tape, &outputs.waypoints, is_red, y_stop, &ctx.c);
    let ss = stop_sign_penalty(tape, &outputs.waypoints, flag, ctx.dt, ctx.eps_v);
    let sp = curvature_speed_penalty(
        tape,
        &outputs.waypoints,
        &batch.delta_heading,
        ctx.dt,
        ctx.v_lb,
    );

    let terms: [(&'static str, TensorId, f64); 9] = [
        ("policy", policy, 1.0),
        ("front_seg", front, weights.eta_front),
        ("td_seg", td, weights.eta_td),
        ("light", light, weights.eta_light),
        ("stop", stop, weights.eta_stop),
        ("align", align, weights.eta_align),
        ("red_light", red, weights.lambda_red),
        ("stop_sign", ss, weights.lambda_stop),
        ("speed", sp, weights.lambda_speed),
    ];
    let mut vals = [0.0; 9];
    for (k, (name, id, _)) in terms.iter().enumerate() {
        let v = tape.value(*id).item();
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
        vals[k] = v;
    }

    let mut total = terms[0].1;
    for (_, id, w) in terms.iter().skip(1) {
        let scaled = tape.scale(*id, *w);
        total = tape.add(total, scaled);
    }
    let total_v = tape.value(total).item();
    if !total_v.is_finite() {
        return Err(LossError::NonFinite("total"));
    }

    Ok((
        total,
        LossBreakdown {
            policy: vals[0],
            front_seg: vals[1],
            td_seg: vals[2],
            light: vals[3],
            stop: vals[4],
            align: vals[5],
            red_light: vals[6],
            stop_sign: vals[7],
            speed: vals[8],
            total: total_v,
        },
    ))
}
