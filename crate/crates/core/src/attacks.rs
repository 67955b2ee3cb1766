//! White-box attacks on the camera input: single-step FGSM and a trained
//! nine-dot lens-sticker pattern. Neither touches model weights.

use crate::autodiff::{AdamState, Tape, Tensor, TensorId};
use crate::container::{Container, ContainerError, RecordReader, RecordWriter};
use crate::losses::{total_loss, LossWeights, PenaltyContext};
use crate::model::{Batch, BatchNodes, Mode, Model};
use crate::sensors::{CAM_C, CAM_H, CAM_W};
use std::path::Path;
use thiserror::Error;

pub const DOT_MAGIC: [u8; 4] = *b"PDOT";

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("malformed dot pattern file")]
    Malformed,
}

/// One lens dot: fixed geometry, trainable color and opacity. The per-pixel
/// opacity falls off linearly from `peak_alpha` at the center to zero at
/// `radius` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dot {
    /// (row, col) as fractions of image height/width.
    pub center: (f64, f64),
    /// Falloff radius in pixels.
    pub radius: f64,
    pub color: [f64; 3],
    pub peak_alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DotPattern {
    pub dots: Vec<Dot>,
}

impl DotPattern {
    /// Nine dots on a 3×3 grid, mid-gray and half-transparent.
    pub fn grid3x3() -> Self {
        let mut dots = Vec::with_capacity(9);
        for r in 0..3 {
            for c in 0..3 {
                dots.push(Dot {
                    center: ((r as f64 + 0.5) / 3.0, (c as f64 + 0.5) / 3.0),
                    radius: 5.0,
                    color: [0.5, 0.5, 0.5],
                    peak_alpha: 0.5,
                });
            }
        }
        Self { dots }
    }

    pub fn save(&self, path: &Path) -> Result<(), AttackError> {
        let mut c = Container::new();
        c.meta.push("format=dots/1".to_string());
        c.meta.push(format!("n_dots={}", self.dots.len()));
        for d in &self.dots {
            let mut w = RecordWriter::new();
            w.f64(d.center.0);
            w.f64(d.center.1);
            w.f64(d.radius);
            w.f64(d.color[0]);
            w.f64(d.color[1]);
            w.f64(d.color[2]);
            w.f64(d.peak_alpha);
            c.records.push(w.finish());
        }
        c.write(path, DOT_MAGIC)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AttackError> {
        let c = Container::read(path, DOT_MAGIC)?;
        let mut dots = Vec::with_capacity(c.records.len());
        for rec in &c.records {
            let mut r = RecordReader::new(rec);
            let read = |r: &mut RecordReader| r.f64().map_err(|_| AttackError::Malformed);
            let cr = read(&mut r)?;
            let cc = read(&mut r)?;
            let radius = read(&mut r)?;
            let color = [read(&mut r)?, read(&mut r)?, read(&mut r)?];
            let peak_alpha = read(&mut r)?;
            dots.push(Dot {
                center: (cr, cc),
                radius,
                color,
                peak_alpha,
            });
        }
        Ok(Self { dots })
    }
}

/// Spatial falloff weights for one dot: max(0, 1 − dist/radius) per pixel.
fn dot_weights(dot: &Dot) -> Vec<f64> {
    let cy = dot.center.0 * CAM_H as f64 - 0.5;
    let cx = dot.center.1 * CAM_W as f64 - 0.5;
    let mut w = vec![0.0; CAM_H * CAM_W];
    for r in 0..CAM_H {
        for c in 0..CAM_W {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let dist = (dy * dy + dx * dx).sqrt();
            w[r * CAM_W + c] = (1.0 - dist / dot.radius).max(0.0);
        }
    }
    w
}

/// Composite the dot pattern over one flat camera image, front to back:
/// out = (1−α)·x + α·color with α = peak_alpha · falloff.
pub fn apply_dots(image: &Tensor, pattern: &DotPattern) -> Tensor {
    let pixels = CAM_H * CAM_W;
    assert_eq!(image.len(), CAM_C * pixels, "unexpected camera size");
    let mut out = image.data().to_vec();
    for dot in &pattern.dots {
        let w = dot_weights(dot);
        for ch in 0..CAM_C {
            for p in 0..pixels {
                let a = dot.peak_alpha * w[p];
                let i = ch * pixels + p;
                out[i] = (1.0 - a) * out[i] + a * dot.color[ch];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Single-step FGSM on a batch's camera tensor: x' = clamp(x + ε·sign(g), 0, 1)
/// where g is the gradient of the full training loss with respect to the
/// camera pixels. Returns the perturbed (N × pixels) camera tensor.
pub fn fgsm(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    ctx: &PenaltyContext,
    eps: f64,
) -> Tensor {
    let mut tape = Tape::new();
    let params = model.frozen(&mut tape);
    let camera = tape.leaf(batch.camera.clone());
    let nodes = BatchNodes {
        camera,
        lidar: tape.constant(batch.lidar.clone()),
        meas: tape.constant(batch.meas.clone()),
        goal: tape.constant(batch.goal.clone()),
    };
    let out = model.forward(&mut tape, &params, nodes, Mode::Eval, None);
    let (loss, _) = total_loss(&mut tape, &out, batch, weights, ctx)
        .expect("attack loss must stay finite on clean inputs");
    let grads = tape.backward(loss).expect("fresh tape");
    let g = grads.get_or_zeros(camera, batch.camera.shape());
    let data: Vec<f64> = batch
        .camera
        .data()
        .iter()
        .zip(g.data())
        .map(|(x, gi)| (x + eps * gi.signum()).clamp(0.0, 1.0))
        .collect();
    Tensor::new(batch.camera.shape().to_vec(), data)
}

/// Push the dot compositing onto the tape so gradients reach the trainable
/// opacity/color leaves. `alphas` is a [n_dots] leaf, `colors` [n_dots, 3].
fn apply_dots_tape(
    tape: &mut Tape,
    camera: TensorId,
    pattern: &DotPattern,
    alphas: TensorId,
    colors: TensorId,
) -> TensorId {
    let n = tape.shape(camera)[0];
    let pixels = CAM_H * CAM_W;
    let mut out = camera;
    for (d, dot) in pattern.dots.iter().enumerate() {
        let w = dot_weights(dot);
        // channel-replicated falloff, tiled across the batch
        let mut tile = Vec::with_capacity(n * CAM_C * pixels);
        for _ in 0..n {
            for _ in 0..CAM_C {
                tile.extend_from_slice(&w);
            }
        }
        let w_tile = tape.constant(Tensor::new(vec![n, CAM_C * pixels], tile));
        let a_d = tape.slice(alphas, 0, d, d + 1);
        let alpha_map = tape.scale_by_scalar(w_tile, a_d);

        let ones = Tensor::new(vec![n, pixels], vec![1.0; n * pixels]);
        let mut channel_maps = Vec::with_capacity(CAM_C);
        let dot_colors = tape.slice(colors, 0, d, d + 1);
        for ch in 0..CAM_C {
            let c_ch = tape.slice(dot_colors, 1, ch, ch + 1);
            let ones_c = tape.constant(ones.clone());
            channel_maps.push(tape.scale_by_scalar(ones_c, c_ch));
        }
        let color_map = tape.concat(&channel_maps, 1);

        let neg_a = tape.scale(alpha_map, -1.0);
        let keep = tape.add_const(neg_a, 1.0);
        let base = tape.mul(out, keep);
        let paint = tape.mul(alpha_map, color_map);
        out = tape.add(base, paint);
    }
    out
}

/// Train dot colors and opacities by gradient ascent on the training loss
/// over the given batches; geometry stays fixed. Returns the pattern with
/// the highest attack loss observed (the initial one included).
pub fn dot_attack_train(
    model: &Model,
    batches: &[Batch],
    weights: &LossWeights,
    ctx: &PenaltyContext,
    steps: usize,
    lr: f64,
) -> DotPattern {
    let init = DotPattern::grid3x3();
    let geometry = init.clone();
    let n_dots = init.dots.len();
    let mut alphas = Tensor::new(
        vec![n_dots],
        init.dots.iter().map(|d| d.peak_alpha).collect(),
    );
    let mut colors = Tensor::new(
        vec![n_dots, 3],
        init.dots.iter().flat_map(|d| d.color).collect(),
    );

    let assemble = |alphas: &Tensor, colors: &Tensor| -> DotPattern {
        let mut p = geometry.clone();
        for (d, dot) in p.dots.iter_mut().enumerate() {
            dot.peak_alpha = alphas.data()[d];
            dot.color = [
                colors.data()[d * 3],
                colors.data()[d * 3 + 1],
                colors.data()[d * 3 + 2],
            ];
        }
        p
    };

    let eval_step = |alphas: &Tensor,
                     colors: &Tensor,
                     batch: &Batch,
                     want_grads: bool|
     -> Option<(f64, Option<(Tensor, Tensor)>)> {
        let mut tape = Tape::new();
        let params = model.frozen(&mut tape);
        let cam = tape.constant(batch.camera.clone());
        let a_id = tape.leaf(alphas.clone());
        let c_id = tape.leaf(colors.clone());
        let attacked = apply_dots_tape(&mut tape, cam, &geometry, a_id, c_id);
        let nodes = BatchNodes {
            camera: attacked,
            lidar: tape.constant(batch.lidar.clone()),
            meas: tape.constant(batch.meas.clone()),
            goal: tape.constant(batch.goal.clone()),
        };
        let out = model.forward(&mut tape, &params, nodes, Mode::Eval, None);
        let (loss, breakdown) = total_loss(&mut tape, &out, batch, weights, ctx).ok()?;
        if !breakdown.total.is_finite() {
            return None;
        }
        if !want_grads {
            return Some((breakdown.total, None));
        }
        let grads = tape.backward(loss).ok()?;
        Some((
            breakdown.total,
            Some((
                grads.get_or_zeros(a_id, alphas.shape()),
                grads.get_or_zeros(c_id, colors.shape()),
            )),
        ))
    };

    let mean_loss = |alphas: &Tensor, colors: &Tensor| -> Option<f64> {
        let mut acc = 0.0;
        for b in batches {
            acc += eval_step(alphas, colors, b, false)?.0;
        }
        Some(acc / batches.len() as f64)
    };

    let mut best = assemble(&alphas, &colors);
    let mut best_loss = match mean_loss(&alphas, &colors) {
        Some(v) => v,
        None => return best,
    };

    let mut adam = AdamState::new(&[alphas.clone(), colors.clone()]);
    for step in 0..steps {
        let batch = &batches[step % batches.len()];
        let Some((_, Some((ga, gc)))) = eval_step(&alphas, &colors, batch, true) else {
            break; // divergence: keep the best finite pattern
        };
        // ascent: feed negated gradients to the minimizer
        let neg =
            |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| -v).collect());
        let mut params = [alphas.clone(), colors.clone()];
        crate::autodiff::adam_step(&mut params, &[neg(&ga), neg(&gc)], &mut adam, lr);
        for p in &mut params {
            for v in p.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        alphas = params[0].clone();
        colors = params[1].clone();
        if let Some(l) = mean_loss(&alphas, &colors) {
            if l > best_loss {
                best_loss = l;
                best = assemble(&alphas, &colors);
            }
        } else {
            break;
        }
    }
    best
}
