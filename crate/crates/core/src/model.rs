//! The driving policy network.
//!
//! Camera and BEV inputs pass through flat MLP encoders into 512-wide
//! embeddings. Two MLP heads per modality produce diagonal-Gaussian
//! (mean, log-variance) shared embeddings of width 128; the sampled shared
//! embedding comes from the image-side Gaussian. Segmentation decoding is
//! crossed: the front view decodes from the LiDAR embedding and the top-down
//! view from the image embedding. Traffic-light and stop-sign heads read the
//! image embedding. The fused vector [img | lidar | shared | meas] (width
//! 1156) feeds a GRU that emits waypoint displacements autoregressively.

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::container::{Container, ContainerError, RecordReader, RecordWriter};
use crate::dataset::Frame;
use crate::sensors;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PCKP";

pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub img_embed_dim: usize,
    pub lidar_embed_dim: usize,
    pub shared_dim: usize,
    pub meas_dim: usize,
    pub hidden_dim: usize,
    pub waypoint_count: usize,
    pub enc_hidden: usize,
    pub seg_hidden: usize,
    pub aux_hidden: usize,
    /// Ablation: feed zeros instead of the sampled shared embedding.
    pub zero_shared: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_embed_dim: 512,
            lidar_embed_dim: 512,
            shared_dim: 128,
            meas_dim: 4,
            hidden_dim: 64,
            waypoint_count: 4,
            enc_hidden: 64,
            seg_hidden: 32,
            aux_hidden: 64,
            zero_shared: false,
        }
    }
}

impl ModelConfig {
    pub fn cam_input_dim(&self) -> usize {
        sensors::CAM_C * sensors::CAM_H * sensors::CAM_W
    }

    pub fn lidar_input_dim(&self) -> usize {
        sensors::BEV_C * sensors::BEV_H * sensors::BEV_W
    }

    pub fn front_seg_pixels(&self) -> usize {
        sensors::CAM_H * sensors::CAM_W
    }

    pub fn td_seg_pixels(&self) -> usize {
        sensors::BEV_H * sensors::BEV_W
    }

    pub fn fused_dim(&self) -> usize {
        self.img_embed_dim + self.lidar_embed_dim + self.shared_dim + self.meas_dim
    }

    /// Ordered parameter layout: (name, shape).
    pub fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = self;
        let gru_in = 2 + 2; // previous waypoint + goal
        vec![
            ("cam_w1", vec![c.cam_input_dim(), c.enc_hidden]),
            ("cam_b1", vec![c.enc_hidden]),
            ("cam_w2", vec![c.enc_hidden, c.img_embed_dim]),
            ("cam_b2", vec![c.img_embed_dim]),
            ("lid_w1", vec![c.lidar_input_dim(), c.enc_hidden]),
            ("lid_b1", vec![c.enc_hidden]),
            ("lid_w2", vec![c.enc_hidden, c.lidar_embed_dim]),
            ("lid_b2", vec![c.lidar_embed_dim]),
            ("img_mu_w", vec![c.img_embed_dim, c.shared_dim]),
            ("img_mu_b", vec![c.shared_dim]),
            ("img_lv_w", vec![c.img_embed_dim, c.shared_dim]),
            ("img_lv_b", vec![c.shared_dim]),
            ("lid_mu_w", vec![c.lidar_embed_dim, c.shared_dim]),
            ("lid_mu_b", vec![c.shared_dim]),
            ("lid_lv_w", vec![c.lidar_embed_dim, c.shared_dim]),
            ("lid_lv_b", vec![c.shared_dim]),
            // front seg decodes from the LiDAR embedding (crossed flow)
            ("fs_w1", vec![c.lidar_embed_dim, c.seg_hidden]),
            ("fs_b1", vec![c.seg_hidden]),
            (
                "fs_w2",
                vec![c.seg_hidden, sensors::SEG_C * c.front_seg_pixels()],
            ),
            ("fs_b2", vec![sensors::SEG_C * c.front_seg_pixels()]),
            // top-down seg decodes from the image embedding (crossed flow)
            ("td_w1", vec![c.img_embed_dim, c.seg_hidden]),
            ("td_b1", vec![c.seg_hidden]),
            (
                "td_w2",
                vec![c.seg_hidden, sensors::SEG_C * c.td_seg_pixels()],
            ),
            ("td_b2", vec![sensors::SEG_C * c.td_seg_pixels()]),
            ("light_w1", vec![c.img_embed_dim, c.aux_hidden]),
            ("light_b1", vec![c.aux_hidden]),
            ("light_w2", vec![c.aux_hidden, 4]),
            ("light_b2", vec![4]),
            ("stop_w1", vec![c.img_embed_dim, c.aux_hidden]),
            ("stop_b1", vec![c.aux_hidden]),
            ("stop_w2", vec![c.aux_hidden, 1]),
            ("stop_b2", vec![1]),
            ("fuse_w", vec![c.fused_dim(), c.hidden_dim]),
            ("fuse_b", vec![c.hidden_dim]),
            ("gru_wz", vec![gru_in, c.hidden_dim]),
            ("gru_uz", vec![c.hidden_dim, c.hidden_dim]),
            ("gru_bz", vec![c.hidden_dim]),
            ("gru_wr", vec![gru_in, c.hidden_dim]),
            ("gru_ur", vec![c.hidden_dim, c.hidden_dim]),
            ("gru_br", vec![c.hidden_dim]),
            ("gru_wh", vec![gru_in, c.hidden_dim]),
            ("gru_uh", vec![c.hidden_dim, c.hidden_dim]),
            ("gru_bh", vec![c.hidden_dim]),
            ("out_w", vec![c.hidden_dim, 2]),
            ("out_b", vec![2]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint parameter {index} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint holds {found} parameters, expected {expected}")]
    CountMismatch { found: usize, expected: usize },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Input nodes for one forward pass; creating them as leaves or constants is
/// the caller's choice (FGSM marks the camera as a leaf).
#[derive(Debug, Clone, Copy)]
pub struct BatchNodes {
    pub camera: TensorId,
    pub lidar: TensorId,
    pub meas: TensorId,
    pub goal: TensorId,
}

pub struct ModelOutputs {
    /// T entries of shape (N, 2); cumulative waypoints from the ego origin.
    pub waypoints: Vec<TensorId>,
    pub front_seg_logits: TensorId,
    pub td_seg_logits: TensorId,
    pub light_logits: TensorId,
    pub stop_logit: TensorId,
    pub img_mu: TensorId,
    pub img_logvar: TensorId,
    pub lidar_mu: TensorId,
    pub lidar_logvar: TensorId,
    pub shared_sample: TensorId,
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on open-interval uniforms
    let u1: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .iter()
            .map(|(name, shape)| {
                if shape.len() == 1 && !name.ends_with('w') {
                    // biases start at zero
                    Tensor::zeros(shape.clone())
                } else {
                    let fan_in = shape[0] as f64;
                    let scale = (1.0 / fan_in).sqrt();
                    let n: usize = shape.iter().product();
                    Tensor::new(
                        shape.clone(),
                        (0..n).map(|_| sample_normal(&mut rng) * scale).collect(),
                    )
                }
            })
            .collect();
        Self { config, params }
    }

    pub fn param_index(&self, name: &str) -> usize {
        self.config
            .param_specs()
            .iter()
            .position(|(n, _)| *n == name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    /// Insert all parameters onto a tape as gradient leaves.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Insert all parameters as constants (frozen weights, attack mode).
    pub fn frozen(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect()
    }

    /// Standard-normal reparameterization noise of shape (n, shared_dim).
    pub fn draw_noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let d = self.config.shared_dim;
        Tensor::new(vec![n, d], (0..n * d).map(|_| sample_normal(rng)).collect())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[TensorId],
        inputs: BatchNodes,
        mode: Mode,
        noise: Option<&Tensor>,
    ) -> ModelOutputs {
        let c = &self.config;
        let n = tape.shape(inputs.camera)[0];
        let p = |name: &str| params[self.param_index(name)];

        let linear = |tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId| {
            let y = tape.matmul(x, w);
            tape.add_bias(y, b)
        };
        let dense_tanh = |tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId| {
            let y = linear(tape, x, w, b);
            tape.tanh(y)
        };

        // encoders
        let cam_h = dense_tanh(tape, inputs.camera, p("cam_w1"), p("cam_b1"));
        let img_embed = dense_tanh(tape, cam_h, p("cam_w2"), p("cam_b2"));
        let lid_h = dense_tanh(tape, inputs.lidar, p("lid_w1"), p("lid_b1"));
        let lidar_embed = dense_tanh(tape, lid_h, p("lid_w2"), p("lid_b2"));

        // Gaussian shared-embedding heads
        let img_mu = linear(tape, img_embed, p("img_mu_w"), p("img_mu_b"));
        let img_lv_raw = linear(tape, img_embed, p("img_lv_w"), p("img_lv_b"));
        let img_logvar = tape.clamp(img_lv_raw, LOGVAR_MIN, LOGVAR_MAX);
        let lidar_mu = linear(tape, lidar_embed, p("lid_mu_w"), p("lid_mu_b"));
        let lid_lv_raw = linear(tape, lidar_embed, p("lid_lv_w"), p("lid_lv_b"));
        let lidar_logvar = tape.clamp(lid_lv_raw, LOGVAR_MIN, LOGVAR_MAX);

        // shared sample from the image-side Gaussian
        let shared_sample = if c.zero_shared {
            tape.constant(Tensor::zeros(vec![n, c.shared_dim]))
        } else {
            match mode {
                Mode::Eval => img_mu,
                Mode::Train => {
                    let z = noise.expect("train mode requires reparameterization noise");
                    assert_eq!(z.shape(), &[n, c.shared_dim], "noise shape mismatch");
                    let half_lv = tape.scale(img_logvar, 0.5);
                    let sigma = tape.exp(half_lv);
                    let zc = tape.constant(z.clone());
                    let scaled = tape.mul(sigma, zc);
                    tape.add(img_mu, scaled)
                }
            }
        };

        // crossed segmentation decoders
        let fs_h = dense_tanh(tape, lidar_embed, p("fs_w1"), p("fs_b1"));
        let fs_flat = linear(tape, fs_h, p("fs_w2"), p("fs_b2"));
        let front_seg_logits = tape.reshape(fs_flat, vec![n, sensors::SEG_C, c.front_seg_pixels()]);
        let td_h = dense_tanh(tape, img_embed, p("td_w1"), p("td_b1"));
        let td_flat = linear(tape, td_h, p("td_w2"), p("td_b2"));
        let td_seg_logits = tape.reshape(td_flat, vec![n, sensors::SEG_C, c.td_seg_pixels()]);

        // auxiliary heads from the image embedding
        let light_h = dense_tanh(tape, img_embed, p("light_w1"), p("light_b1"));
        let light_logits = linear(tape, light_h, p("light_w2"), p("light_b2"));
        let stop_h = dense_tanh(tape, img_embed, p("stop_w1"), p("stop_b1"));
        let stop_logit = linear(tape, stop_h, p("stop_w2"), p("stop_b2"));

        // fuse and decode waypoints
        let fused = tape.concat(&[img_embed, lidar_embed, shared_sample, inputs.meas], 1);
        let h0 = dense_tanh(tape, fused, p("fuse_w"), p("fuse_b"));
        let waypoints = self.decode_waypoints(tape, params, h0, inputs.goal, n);

        ModelOutputs {
            waypoints,
            front_seg_logits,
            td_seg_logits,
            light_logits,
            stop_logit,
            img_mu,
            img_logvar,
            lidar_mu,
            lidar_logvar,
            shared_sample,
        }
    }

    /// Autoregressive GRU rollout: hidden starts at the fused vector; each
    /// step consumes [previous waypoint | goal] and emits a displacement that
    /// accumulates into the next waypoint.
    fn decode_waypoints(
        &self,
        tape: &mut Tape,
        params: &[TensorId],
        h0: TensorId,
        goal: TensorId,
        n: usize,
    ) -> Vec<TensorId> {
        let p = |name: &str| params[self.param_index(name)];
        let mut h = h0;
        let mut prev = tape.constant(Tensor::zeros(vec![n, 2]));
        let mut out = Vec::with_capacity(self.config.waypoint_count);
        for _ in 0..self.config.waypoint_count {
            let inp = tape.concat(&[prev, goal], 1);
            let gate = |tape: &mut Tape, w: &str, u: &str, b: &str, hh: TensorId| {
                let a = tape.matmul(inp, p(w));
                let c = tape.matmul(hh, p(u));
                let s = tape.add(a, c);
                tape.add_bias(s, p(b))
            };
            let z_pre = gate(tape, "gru_wz", "gru_uz", "gru_bz", h);
            let z = tape.sigmoid(z_pre);
            let r_pre = gate(tape, "gru_wr", "gru_ur", "gru_br", h);
            let r = tape.sigmoid(r_pre);
            let rh = tape.mul(r, h);
            let cand_pre = gate(tape, "gru_wh", "gru_uh", "gru_bh", rh);
            let cand = tape.tanh(cand_pre);
            let neg_z = tape.scale(z, -1.0);
            let one_minus_z = tape.add_const(neg_z, 1.0);
            let keep = tape.mul(one_minus_z, h);
            let new = tape.mul(z, cand);
            h = tape.add(keep, new);
            let delta_lin = tape.matmul(h, p("out_w"));
            let delta = tape.add_bias(delta_lin, p("out_b"));
            let w = tape.add(prev, delta);
            out.push(w);
            prev = w;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut c = Container::new();
        c.meta.push("format=checkpoint/1".to_string());
        for (name, shape) in self.config.param_specs() {
            c.meta.push(format!(
                "param:{name}={}",
                shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x")
            ));
        }
        for p in &self.params {
            let mut w = RecordWriter::new();
            w.tensor(p);
            c.records.push(w.finish());
        }
        c.write(path, CHECKPOINT_MAGIC)?;
        Ok(())
    }

    pub fn load(path: &Path, config: ModelConfig) -> Result<Self, ModelError> {
        let c = Container::read(path, CHECKPOINT_MAGIC)?;
        let specs = config.param_specs();
        if c.records.len() != specs.len() {
            return Err(ModelError::CountMismatch {
                found: c.records.len(),
                expected: specs.len(),
            });
        }
        let mut params = Vec::with_capacity(specs.len());
        for (i, rec) in c.records.iter().enumerate() {
            let mut r = RecordReader::new(rec);
            let t = r.tensor().map_err(ModelError::Container)?;
            if t.shape() != specs[i].1.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    index: i,
                    found: t.shape().to_vec(),
                    expected: specs[i].1.clone(),
                });
            }
            params.push(t);
        }
        Ok(Self { config, params })
    }
}

/// Assembled batch tensors: policy inputs plus every training target.
#[derive(Debug, Clone)]
pub struct Batch {
    pub camera: Tensor,
    pub lidar: Tensor,
    pub meas: Tensor,
    pub goal: Tensor,
    pub wp_truth: Vec<Tensor>,
    pub front_seg_truth: Tensor,
    pub td_seg_truth: Tensor,
    pub light_truth: Tensor,
    pub stop_truth: Tensor,
    pub is_red: Tensor,
    pub y_stop: Tensor,
    pub stop_flag: Tensor,
    pub delta_heading: Vec<f64>,
}

impl Batch {
    pub fn from_frames(frames: &[&Frame], config: &ModelConfig) -> Self {
        let n = frames.len();
        let t = config.waypoint_count;
        let gather = |f: fn(&Frame) -> &Tensor, width: usize| -> Tensor {
            let mut data = Vec::with_capacity(n * width);
            for fr in frames {
                let src = f(fr);
                assert_eq!(src.len(), width, "frame tensor width mismatch");
                data.extend_from_slice(src.data());
            }
            Tensor::new(vec![n, width], data)
        };
        let cam_w = config.cam_input_dim();
        let lid_w = config.lidar_input_dim();
        let fsp = config.front_seg_pixels();
        let tdp = config.td_seg_pixels();

        let mut wp_truth = Vec::with_capacity(t);
        for j in 0..t {
            let mut data = Vec::with_capacity(n * 2);
            for fr in frames {
                data.push(fr.waypoints[j][0]);
                data.push(fr.waypoints[j][1]);
            }
            wp_truth.push(Tensor::new(vec![n, 2], data));
        }

        let column = |f: &dyn Fn(&Frame) -> f64| -> Tensor {
            Tensor::new(vec![n, 1], frames.iter().map(|fr| f(fr)).collect())
        };

        Self {
            camera: gather(|f| &f.camera, cam_w),
            lidar: gather(|f| &f.lidar, lid_w),
            meas: gather(|f| &f.meas, 4),
            goal: Tensor::new(
                vec![n, 2],
                frames.iter().flat_map(|f| [f.goal.0, f.goal.1]).collect(),
            ),
            wp_truth,
            front_seg_truth: gather(|f| &f.front_seg, sensors::SEG_C * fsp).reshaped(vec![
                n,
                sensors::SEG_C,
                fsp,
            ]),
            td_seg_truth: gather(|f| &f.td_seg, sensors::SEG_C * tdp).reshaped(vec![
                n,
                sensors::SEG_C,
                tdp,
            ]),
            light_truth: Tensor::new(
                vec![n, 4],
                frames.iter().flat_map(|f| f.light_state).collect(),
            ),
            stop_truth: column(&|f| f.stop_sign_flag),
            is_red: column(&|f| if f.is_red { 1.0 } else { 0.0 }),
            // finite sentinel keeps inactive penalties finite in the graph
            y_stop: column(&|f| f.y_stop.min(1e9)),
            stop_flag: column(&|f| f.stop_sign_flag),
            delta_heading: frames.iter().map(|f| f.delta_heading).collect(),
        }
    }

    /// Push all inputs as constants (the usual training path).
    pub fn input_nodes(&self, tape: &mut Tape) -> BatchNodes {
        BatchNodes {
            camera: tape.constant(self.camera.clone()),
            lidar: tape.constant(self.lidar.clone()),
            meas: tape.constant(self.meas.clone()),
            goal: tape.constant(self.goal.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.camera.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn tiny_frame(seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::default();
        let mut t = |n: usize, shape: Vec<usize>| {
            Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect())
        };
        Frame {
            camera: t(cfg.cam_input_dim(), vec![cfg.cam_input_dim()]),
            lidar: t(cfg.lidar_input_dim(), vec![cfg.lidar_input_dim()]),
            front_seg: {
                let p = cfg.front_seg_pixels();
                let mut data = vec![0.0; 4 * p];
                for i in 0..p {
                    data[i] = 1.0;
                }
                Tensor::new(vec![4 * p], data)
            },
            td_seg: {
                let p = cfg.td_seg_pixels();
                let mut data = vec![0.0; 4 * p];
                for i in 0..p {
                    data[p + i] = 1.0;
                }
                Tensor::new(vec![4 * p], data)
            },
            meas: t(4, vec![4]),
            light_state: [0.0, 0.0, 0.0, 1.0],
            stop_sign_flag: 0.0,
            is_red: false,
            y_stop: f64::INFINITY,
            delta_heading: 0.0,
            goal: (0.0, 20.0),
            waypoints: [[0.0, 2.0], [0.0, 4.0], [0.0, 6.0], [0.0, 8.0]],
        }
    }

    fn small_batch() -> (Model, Batch) {
        let model = Model::init(ModelConfig::default(), 7);
        let frames: Vec<Frame> = (0..2).map(tiny_frame).collect();
        let refs: Vec<&Frame> = frames.iter().collect();
        let batch = Batch::from_frames(&refs, &model.config);
        (model, batch)
    }

    #[test]
    fn fused_dim_matches_architecture() {
        let c = ModelConfig::default();
        assert_eq!(c.fused_dim(), 1156);
    }

    #[test]
    fn parameter_count_golden() {
        // catches silent architecture drift
        let c = ModelConfig::default();
        let mut expected = 0usize;
        for (_, shape) in c.param_specs() {
            expected += shape.iter().product::<usize>();
        }
        assert_eq!(c.param_count(), expected);
        assert_eq!(c.param_count(), 2_575_879);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let (model, batch) = small_batch();
        let run = || {
            let mut tape = Tape::new();
            let params = model.frozen(&mut tape);
            let nodes = batch.input_nodes(&mut tape);
            let out = model.forward(&mut tape, &params, nodes, Mode::Eval, None);
            out.waypoints
                .iter()
                .flat_map(|w| tape.value(*w).data().to_vec())
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_forward_seeded_reparameterization() {
        let (model, batch) = small_batch();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let z = model.draw_noise(batch.len(), &mut rng);
            let mut tape = Tape::new();
            let params = model.frozen(&mut tape);
            let nodes = batch.input_nodes(&mut tape);
            let out = model.forward(&mut tape, &params, nodes, Mode::Train, Some(&z));
            tape.value(out.shared_sample).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn waypoint_shapes_and_zero_head() {
        let (mut model, batch) = small_batch();
        // zero the displacement head: every waypoint collapses to the origin
        let i = model.param_index("out_w");
        model.params[i] = Tensor::zeros(model.params[i].shape().to_vec());
        let j = model.param_index("out_b");
        model.params[j] = Tensor::zeros(model.params[j].shape().to_vec());
        let mut tape = Tape::new();
        let params = model.frozen(&mut tape);
        let nodes = batch.input_nodes(&mut tape);
        let out = model.forward(&mut tape, &params, nodes, Mode::Eval, None);
        assert_eq!(out.waypoints.len(), 4);
        for w in &out.waypoints {
            assert_eq!(tape.shape(*w), &[2, 2]);
            assert!(tape.value(*w).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cross_flow_front_seg_ignores_camera() {
        let (model, batch) = small_batch();
        let run = |camera: Tensor| {
            let mut tape = Tape::new();
            let params = model.frozen(&mut tape);
            let nodes = BatchNodes {
                camera: tape.constant(camera),
                lidar: tape.constant(batch.lidar.clone()),
                meas: tape.constant(batch.meas.clone()),
                goal: tape.constant(batch.goal.clone()),
            };
            let out = model.forward(&mut tape, &params, nodes, Mode::Eval, None);
            (
                tape.value(out.front_seg_logits).data().to_vec(),
                tape.value(out.td_seg_logits).data().to_vec(),
            )
        };
        let (front_a, td_a) = run(batch.camera.clone());
        let mut perturbed = batch.camera.clone();
        perturbed.data_mut()[0] += 0.5;
        perturbed.data_mut()[100] -= 0.25;
        let (front_b, td_b) = run(perturbed);
        assert_eq!(front_a, front_b, "front seg must not depend on the camera");
        assert_ne!(td_a, td_b, "td seg must depend on the camera");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (model, _) = small_batch();
        model.save(&path).unwrap();
        let back = Model::load(&path, model.config.clone()).unwrap();
        assert_eq!(back.params, model.params);
    }

    #[test]
    fn full_model_waypoint_gradient_reaches_encoder() {
        let (model, batch) = small_batch();
        let mut tape = Tape::new();
        let params = model.leaves(&mut tape);
        let nodes = batch.input_nodes(&mut tape);
        let out = model.forward(&mut tape, &params, nodes, Mode::Eval, None);
        let last = out.waypoints[3];
        let sq = tape.mul(last, last);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let cam_w1 = params[model.param_index("cam_w1")];
        let g = grads.get(cam_w1).expect("encoder must receive gradient");
        assert!(g.data().iter().any(|&v| v != 0.0));
    }
}
