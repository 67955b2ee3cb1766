//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] replays the
//! record in reverse and accumulates gradients for every leaf marked as
//! requiring them, including input tensors (needed for input-gradient
//! attacks). Shape mismatches are hard errors that name both shapes.
//!
//! Design constraints, fixed project-wide:
//! - 64-bit floats only.
//! - No broadcasting beyond scalar-tensor and the row-bias case; reshape
//!   explicitly elsewhere.
//! - Subgradient at relu/max kinks is 0.
//! - A tape can be consumed by backward exactly once.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already consumed this tape")]
    TapeConsumed,
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor shape {:?} needs {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-singleton tensor");
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.data.len(),
            "cannot reshape {:?} ({} elems) to {:?}",
            self.shape,
            self.data.len(),
            shape
        );
        self.shape = shape;
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn assert_same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape, b.shape,
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape, b.shape
    );
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<TensorId>,
    // (grad_out, parent values, node value) -> one grad contribution per parent
    backward: Option<BackFn>,
    needs_grad: bool,
}

/// Gradients for every leaf reachable from the loss.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros of the given shape when unreachable.
    pub fn get_or_zeros(&self, id: TensorId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Records forward operations for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, parents: Vec<TensorId>, backward: BackFn) -> TensorId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: Some(backward),
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf that participates in gradient computation (parameters, attacked inputs).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: true,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf excluded from gradients (data, targets, context constants).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: false,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape("add", va, vb);
        let value = Tensor::new(
            va.shape.clone(),
            va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
        );
        self.push(
            value,
            vec![a, b],
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape("sub", va, vb);
        let value = Tensor::new(
            va.shape.clone(),
            va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect(),
        );
        self.push(
            value,
            vec![a, b],
            Box::new(|g, _, _| {
                let neg = Tensor::new(g.shape.clone(), g.data.iter().map(|v| -v).collect());
                vec![g.clone(), neg]
            }),
        )
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape("mul", va, vb);
        let value = Tensor::new(
            va.shape.clone(),
            va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
        );
        self.push(
            value,
            vec![a, b],
            Box::new(|g, p, _| {
                let ga = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&p[1].data).map(|(g, y)| g * y).collect(),
                );
                let gb = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&p[0].data).map(|(g, x)| g * x).collect(),
                );
                vec![ga, gb]
            }),
        )
    }

    // ---- scalar-tensor ----

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let va = self.value(a);
        let value = Tensor::new(va.shape.clone(), va.data.iter().map(|x| x * c).collect());
        self.push(
            value,
            vec![a],
            Box::new(move |g, _, _| {
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data.iter().map(|v| v * c).collect(),
                )]
            }),
        )
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let va = self.value(a);
        let value = Tensor::new(va.shape.clone(), va.data.iter().map(|x| x + c).collect());
        self.push(value, vec![a], Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    // ---- elementwise unary ----

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        // derivative as a function of (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> TensorId {
        let va = self.value(a);
        let value = Tensor::new(va.shape.clone(), va.data.iter().map(|&x| f(x)).collect());
        self.push(
            value,
            vec![a],
            Box::new(move |g, p, out| {
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(p[0].data.iter().zip(&out.data))
                        .map(|(g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.sqrt(), |_, y| 0.5 / y)
    }

    pub fn sin(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.sin(), |x, _| x.cos())
    }

    /// Elementwise max{a, c}. Subgradient at the kink is 0.
    pub fn max_with_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(
            a,
            move |x| x.max(c),
            move |x, _| if x > c { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise min{a, c}. Subgradient at the kink is 0.
    pub fn min_with_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(
            a,
            move |x| x.min(c),
            move |x, _| if x < c { 1.0 } else { 0.0 },
        )
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let m = self.max_with_scalar(a, lo);
        self.min_with_scalar(m, hi)
    }

    /// Multiply a tensor by a scalar node (trainable scale).
    pub fn scale_by_scalar(&mut self, a: TensorId, s: TensorId) -> TensorId {
        let sv = self.value(s);
        assert!(
            sv.data.len() == 1,
            "scale_by_scalar: scale must be a scalar, got {:?}",
            sv.shape
        );
        let c = sv.data[0];
        let va = self.value(a);
        let value = Tensor::new(va.shape.clone(), va.data.iter().map(|x| x * c).collect());
        self.push(
            value,
            vec![a, s],
            Box::new(|g, p, _| {
                let c = p[1].data[0];
                let ga = Tensor::new(g.shape.clone(), g.data.iter().map(|v| v * c).collect());
                let gs: f64 = g.data.iter().zip(&p[0].data).map(|(g, x)| g * x).sum();
                vec![ga, Tensor::new(p[1].shape.clone(), vec![gs])]
            }),
        )
    }

    /// Per-row L2 norm of an (N x D) matrix -> (N x 1). Forward is exact;
    /// the subgradient at a zero row is 0.
    pub fn row_norm(&mut self, a: TensorId) -> TensorId {
        let va = self.value(a);
        assert_eq!(
            va.shape.len(),
            2,
            "row_norm needs a 2D input, got {:?}",
            va.shape
        );
        let (n, d) = (va.shape[0], va.shape[1]);
        let mut out = vec![0.0; n];
        for r in 0..n {
            out[r] = va.data[r * d..(r + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
        }
        self.push(
            Tensor::new(vec![n, 1], out),
            vec![a],
            Box::new(move |g, p, out| {
                let mut gp = vec![0.0; p[0].data.len()];
                for r in 0..n {
                    let norm = out.data[r];
                    if norm > 0.0 {
                        for c in 0..d {
                            gp[r * d + c] = g.data[r] * p[0].data[r * d + c] / norm;
                        }
                    }
                }
                vec![Tensor::new(p[0].shape.clone(), gp)]
            }),
        )
    }

    // ---- linear algebra ----

    /// 2D matrix product (m x k) . (k x n) -> (m x n).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape.len(),
            2,
            "matmul lhs must be 2D, got {:?}",
            va.shape
        );
        assert_eq!(
            vb.shape.len(),
            2,
            "matmul rhs must be 2D, got {:?}",
            vb.shape
        );
        assert_eq!(
            va.shape[1], vb.shape[0],
            "matmul: inner dims differ, {:?} vs {:?}",
            va.shape, vb.shape
        );
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let value = Tensor::new(vec![m, n], matmul_raw(&va.data, &vb.data, m, k, n));
        self.push(
            value,
            vec![a, b],
            Box::new(move |g, p, _| {
                // dA = G . B^T ; dB = A^T . G
                let bt = transpose_raw(&p[1].data, k, n);
                let at = transpose_raw(&p[0].data, m, k);
                let ga = Tensor::new(vec![m, k], matmul_raw(&g.data, &bt, m, n, k));
                let gb = Tensor::new(vec![k, n], matmul_raw(&at, &g.data, k, m, n));
                vec![ga, gb]
            }),
        )
    }

    /// Add a length-D bias row to every row of an (N x D) matrix.
    pub fn add_bias(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape.len(),
            2,
            "add_bias lhs must be 2D, got {:?}",
            va.shape
        );
        assert_eq!(
            vb.shape,
            vec![va.shape[1]],
            "add_bias: bias shape {:?} does not match row width of {:?}",
            vb.shape,
            va.shape
        );
        let (n, d) = (va.shape[0], va.shape[1]);
        let mut data = va.data.clone();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += vb.data[c];
            }
        }
        self.push(
            Tensor::new(va.shape.clone(), data),
            vec![a, b],
            Box::new(move |g, _, _| {
                let mut gb = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        gb[c] += g.data[r * d + c];
                    }
                }
                vec![g.clone(), Tensor::new(vec![d], gb)]
            }),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let va = self.value(a);
        let old = va.shape.clone();
        let value = va.clone().reshaped(shape);
        self.push(
            value,
            vec![a],
            Box::new(move |g, _, _| vec![g.clone().reshaped(old.clone())]),
        )
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TensorId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| self.value(*p).shape.clone()).collect();
        let rank = shapes[0].len();
        for s in &shapes {
            assert_eq!(
                s.len(),
                rank,
                "concat: rank mismatch {:?} vs {:?}",
                shapes[0],
                s
            );
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        s[d], shapes[0][d],
                        "concat: shape mismatch on non-concat axis, {:?} vs {:?}",
                        shapes[0], s
                    );
                }
            }
        }
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut data = vec![0.0; total];
        let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
        let out_width = out_shape[axis] * inner;
        {
            let mut offset = 0;
            for (pi, p) in parts.iter().enumerate() {
                let src = &self.nodes[p.0].value.data;
                for o in 0..outer {
                    let dst = o * out_width + offset;
                    data[dst..dst + widths[pi]]
                        .copy_from_slice(&src[o * widths[pi]..(o + 1) * widths[pi]]);
                }
                offset += widths[pi];
            }
        }
        let widths_c = widths.clone();
        self.push(
            Tensor::new(out_shape, data),
            parts.to_vec(),
            Box::new(move |g, p, _| {
                let mut grads = Vec::with_capacity(p.len());
                let mut offset = 0;
                for (pi, pv) in p.iter().enumerate() {
                    let mut gp = vec![0.0; pv.data.len()];
                    for o in 0..outer {
                        let src = o * out_width + offset;
                        gp[o * widths_c[pi]..(o + 1) * widths_c[pi]]
                            .copy_from_slice(&g.data[src..src + widths_c[pi]]);
                    }
                    grads.push(Tensor::new(pv.shape.clone(), gp));
                    offset += widths_c[pi];
                }
                grads
            }),
        )
    }

    /// Slice `[start, end)` along `axis`.
    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, end: usize) -> TensorId {
        let va = self.value(a);
        let shape = va.shape.clone();
        assert!(
            axis < shape.len() && start <= end && end <= shape[axis],
            "slice [{start}, {end}) on axis {axis} out of bounds for {:?}",
            shape
        );
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_width = shape[axis] * inner;
        let out_len = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = out_len;
        let mut data = vec![0.0; outer * out_len * inner];
        for o in 0..outer {
            let src = o * in_width + start * inner;
            data[o * out_len * inner..(o + 1) * out_len * inner]
                .copy_from_slice(&va.data[src..src + out_len * inner]);
        }
        self.push(
            Tensor::new(out_shape, data),
            vec![a],
            Box::new(move |g, p, _| {
                let mut gp = vec![0.0; p[0].data.len()];
                for o in 0..outer {
                    let dst = o * in_width + start * inner;
                    gp[dst..dst + out_len * inner]
                        .copy_from_slice(&g.data[o * out_len * inner..(o + 1) * out_len * inner]);
                }
                vec![Tensor::new(p[0].shape.clone(), gp)]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let va = self.value(a);
        let value = Tensor::scalar(va.data.iter().sum());
        self.push(
            value,
            vec![a],
            Box::new(|g, p, _| {
                let gv = g.item();
                vec![Tensor::new(p[0].shape.clone(), vec![gv; p[0].data.len()])]
            }),
        )
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of absolute elementwise differences (scalar). Subgradient at 0 is 0.
    pub fn l1_diff(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape("l1_diff", va, vb);
        let value = Tensor::scalar(
            va.data
                .iter()
                .zip(&vb.data)
                .map(|(x, y)| (x - y).abs())
                .sum(),
        );
        self.push(
            value,
            vec![a, b],
            Box::new(|g, p, _| {
                let gv = g.item();
                let sign: Vec<f64> = p[0]
                    .data
                    .iter()
                    .zip(&p[1].data)
                    .map(|(x, y)| gv * (x - y).signum() * if x == y { 0.0 } else { 1.0 })
                    .collect();
                let neg: Vec<f64> = sign.iter().map(|v| -v).collect();
                vec![
                    Tensor::new(p[0].shape.clone(), sign),
                    Tensor::new(p[1].shape.clone(), neg),
                ]
            }),
        )
    }

    // ---- softmax family ----

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let va = self.value(a);
        let shape = va.shape.clone();
        let (outer, k, inner) = axis_strides(&shape, axis);
        let mut data = va.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * k + c) * inner + i;
                let mx = (0..k)
                    .map(|c| data[idx(c)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..k {
                    let e = (data[idx(c)] - mx).exp();
                    data[idx(c)] = e;
                    z += e;
                }
                for c in 0..k {
                    data[idx(c)] /= z;
                }
            }
        }
        self.push(
            Tensor::new(shape, data),
            vec![a],
            Box::new(move |g, p, out| {
                // dx = y * (g - sum(y * g) over the axis group)
                let mut gp = vec![0.0; p[0].data.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |c: usize| (o * k + c) * inner + i;
                        let dot: f64 = (0..k).map(|c| out.data[idx(c)] * g.data[idx(c)]).sum();
                        for c in 0..k {
                            gp[idx(c)] = out.data[idx(c)] * (g.data[idx(c)] - dot);
                        }
                    }
                }
                vec![Tensor::new(p[0].shape.clone(), gp)]
            }),
        )
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let va = self.value(a);
        let shape = va.shape.clone();
        let (outer, k, inner) = axis_strides(&shape, axis);
        let mut data = va.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * k + c) * inner + i;
                let mx = (0..k)
                    .map(|c| data[idx(c)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (data[idx(c)] - mx).exp()).sum();
                let lz = mx + z.ln();
                for c in 0..k {
                    data[idx(c)] -= lz;
                }
            }
        }
        self.push(
            Tensor::new(shape, data),
            vec![a],
            Box::new(move |g, p, out| {
                // dx = g - softmax * sum(g) over the axis group
                let mut gp = vec![0.0; p[0].data.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |c: usize| (o * k + c) * inner + i;
                        let gsum: f64 = (0..k).map(|c| g.data[idx(c)]).sum();
                        for c in 0..k {
                            gp[idx(c)] = g.data[idx(c)] - out.data[idx(c)].exp() * gsum;
                        }
                    }
                }
                vec![Tensor::new(p[0].shape.clone(), gp)]
            }),
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Consumes the tape's one backward
    /// budget; a second call errors.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 || !lv.shape.is_empty() {
            return Err(AutodiffError::NonScalarLoss(lv.shape.clone()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&Tensor> = node
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect();
                let contributions = back(&g, &parent_vals, &node.value);
                debug_assert_eq!(contributions.len(), node.parents.len());
                for (p, c) in node.parents.clone().iter().zip(contributions) {
                    match &mut grads[p.0] {
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(&c.data) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(c),
                    }
                }
            } else {
                // leaf: keep the accumulated gradient
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(
        axis < shape.len(),
        "axis {axis} out of range for {:?}",
        shape
    );
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

// ---- verification harness ----

/// Max relative error between analytic gradients and central differences.
///
/// `f` must rebuild the computation on the tape it is given, returning the
/// scalar loss; `x` is the single differentiated leaf. Sample `x` away from
/// relu/max kinks.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Tape, TensorId) -> TensorId,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let loss = f(&mut tape, xid);
    let grads = tape.backward(loss).expect("grad_check: backward failed");
    let analytic = grads.get_or_zeros(xid, x.shape());

    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let eval = |v: f64| {
            let mut xp = x.clone();
            xp.data_mut()[i] = v;
            let mut t = Tape::new();
            let id = t.leaf(xp);
            let l = f(&mut t, id);
            t.value(l).item()
        };
        let x0 = x.data()[i];
        let numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    max_err
}

// ---- optimizer ----

/// Per-parameter Adam moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            t: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One in-place Adam update over a parameter list.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.shape(), g.shape(), "adam_step: grad shape mismatch");
        for i in 0..p.len() {
            let gi = g.data()[i];
            m.data_mut()[i] = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            v.data_mut()[i] = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m.data()[i] / bc1;
            let vhat = v.data()[i] / bc2;
            p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}
