//! Record-and-replay reverse-mode differentiation.
//!
//! Forward ops append nodes to a [`Tape`]; [`Tape::backward`] replays the
//! recorded rules in reverse, accumulating gradients into every leaf that
//! was registered with `requires_grad`.

use super::kernels;
use super::rearrange::RearrangeSpec;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// out = a @ b with a: [..., p, q], b: [q, r]
    MatMul { a: TensorId, b: TensorId },
    /// out = x + bias broadcast over the last axis
    BiasAdd { x: TensorId, bias: TensorId },
    Add { a: TensorId, b: TensorId },
    /// Hadamard product
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: f64 },
    Gelu { x: TensorId },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    /// input [h,w,cin] (*) kernel [k,k,cin,cout], zero padding, no flip
    Conv2d {
        x: TensorId,
        kernel: TensorId,
        stride: usize,
        pad: usize,
    },
    Rearrange { x: TensorId, spec: RearrangeSpec },
    Reshape { x: TensorId },
    ConcatLast { parts: Vec<TensorId> },
    Softmax { x: TensorId },
    LogSoftmax { x: TensorId },
    /// [rows, c] -> [c], mean over rows
    MeanRows { x: TensorId },
    SumAll { x: TensorId },
}

struct Node {
    op: Op,
    value: Tensor,
    /// True when this tensor's gradient is needed: it is a grad-requiring
    /// leaf or feeds one. Backward skips everything else.
    needs_grad: bool,
}

/// Sequence of recorded operations. Node inputs always precede the node, so
/// a single reverse sweep implements the chain rule.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// `backward` will populate its gradient.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        let needs_grad = value.requires_grad();
        self.push(Op::Leaf, value, needs_grad)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> TensorId {
        value.requires_grad = false;
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Gradient of a leaf after `backward`, if any was accumulated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grad(&mut self, id: TensorId) {
        self.nodes[id.0].value.zero_grad();
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn record(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[TensorId]) -> TensorId {
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        let value = Tensor::from_vec(shape, data).expect("op output shape consistent");
        self.push(op, value, needs_grad)
    }

    // ── Operations ──────────────────────────────────────────────────

    /// Batched contraction over the shared index: a [..., p, q] @ b [q, r].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (a_shape, b_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let q = *a_shape.last().ok_or(Error::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.clone(),
            rhs: b_shape.clone(),
        })?;
        if b_shape.len() != 2 || b_shape[0] != q {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let r = b_shape[1];
        let rows = self.value(a).numel() / q;
        let mut out = vec![0.0; rows * r];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, rows, q, r);
        let mut out_shape = a_shape;
        *out_shape.last_mut().unwrap() = r;
        Ok(self.record(Op::MatMul { a, b }, out_shape, out, &[a, b]))
    }

    /// x [..., c] + bias [c].
    pub fn bias_add(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let x_shape = self.shape(x).to_vec();
        let b_shape = self.shape(bias).to_vec();
        let c = *x_shape.last().unwrap_or(&0);
        if b_shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: x_shape,
                rhs: b_shape,
            });
        }
        let b_data = self.data(bias);
        let x_data = self.data(x);
        let mut out = Vec::with_capacity(x_data.len());
        for row in x_data.chunks_exact(c) {
            out.extend(row.iter().zip(b_data).map(|(&v, &b)| v + b));
        }
        Ok(self.record(Op::BiasAdd { x, bias }, x_shape, out, &[x, bias]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(Op::Add { a, b }, shape, out, &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(Op::Mul { a, b }, shape, out, &[a, b]))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Scale { x, factor }, shape, out, &[x])
    }

    /// Exact Gaussian-CDF GELU.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Gelu { x }, shape, out, &[x])
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let x_shape = self.shape(x).to_vec();
        let c = *x_shape.last().unwrap_or(&0);
        for affine in [gain, bias] {
            if self.shape(affine) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x_shape,
                    rhs: self.shape(affine).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / c;
        let mut out = vec![0.0; rows * c];
        kernels::layer_norm(self.data(x), self.data(gain), self.data(bias), &mut out, rows, c, eps);
        Ok(self.record(Op::LayerNorm { x, gain, bias, eps }, x_shape, out, &[x, gain, bias]))
    }

    /// Zero-padded cross-correlation of [h,w,cin] with [k,k,cin,cout].
    pub fn conv2d(&mut self, x: TensorId, kernel: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let x_shape = self.shape(x).to_vec();
        let k_shape = self.shape(kernel).to_vec();
        if x_shape.len() != 3 || k_shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape,
                rhs: k_shape,
            });
        }
        let (h, w, cin) = (x_shape[0], x_shape[1], x_shape[2]);
        let k = k_shape[0];
        if k_shape[1] != k || k_shape[2] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape,
                rhs: k_shape,
            });
        }
        let cout = k_shape[3];
        if stride == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {k} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
            });
        }
        let oh = kernels::conv_out_extent(h, k, stride, pad);
        let ow = kernels::conv_out_extent(w, k, stride, pad);
        let mut out = vec![0.0; oh * ow * cout];
        kernels::conv2d(
            self.data(x),
            self.data(kernel),
            &mut out,
            (h, w, cin),
            (k, cout),
            stride,
            pad,
        );
        Ok(self.record(
            Op::Conv2d { x, kernel, stride, pad },
            vec![oh, ow, cout],
            out,
            &[x, kernel],
        ))
    }

    /// Pure index permutation described by `spec`.
    pub fn rearrange(&mut self, x: TensorId, spec: &RearrangeSpec) -> Result<TensorId> {
        spec.check_input(self.shape(x))?;
        let out = spec.apply_data(self.data(x));
        Ok(self.record(
            Op::Rearrange { x, spec: spec.clone() },
            spec.output_shape(),
            out,
            &[x],
        ))
    }

    /// Same data, new shape (row-major order preserved).
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.data(x).to_vec();
        Ok(self.record(Op::Reshape { x }, shape, out, &[x]))
    }

    /// Concatenates along the last axis; all other extents must agree.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_last",
                msg: "no operands".into(),
            });
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut total_last = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total_last += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total_last);
        let lasts: Vec<usize> = parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
        for row in 0..rows {
            for (&p, &c) in parts.iter().zip(&lasts) {
                out.extend_from_slice(&self.data(p)[row * c..(row + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total_last);
        Ok(self.record(Op::ConcatLast { parts: parts.to_vec() }, shape, out, parts))
    }

    /// Max-stabilized softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("softmax needs at least one axis");
        let rows = self.value(x).numel() / c;
        let mut out = vec![0.0; rows * c];
        kernels::softmax_rows(self.data(x), &mut out, rows, c);
        self.record(Op::Softmax { x }, shape, out, &[x])
    }

    pub fn log_softmax(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("log_softmax needs at least one axis");
        let rows = self.value(x).numel() / c;
        let mut out = vec![0.0; rows * c];
        kernels::log_softmax_rows(self.data(x), &mut out, rows, c);
        self.record(Op::LogSoftmax { x }, shape, out, &[x])
    }

    /// [rows, c] -> [c] average over the first axis.
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "mean_rows",
                msg: format!("expected a 2-d tensor, got shape {shape:?}"),
            });
        }
        let (rows, c) = (shape[0], shape[1]);
        let mut out = vec![0.0; c];
        for row in self.data(x).chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        Ok(self.record(Op::MeanRows { x }, vec![c], out, &[x]))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.data(x).iter().sum();
        self.record(Op::SumAll { x }, vec![1], vec![total], &[x])
    }

    fn zip_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Replays the tape in reverse from `loss`, accumulating gradients into
    /// the `grad` buffers of grad-requiring leaves. Repeated calls keep
    /// accumulating until `zero_grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&dy);
                }
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.step_backward(&op, i, &dy, &mut grads);
        }
        Ok(())
    }

    fn grad_buf<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        id: TensorId,
    ) -> Option<&'g mut Vec<f64>> {
        if !self.needs(id) {
            return None;
        }
        let numel = self.value(id).numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn step_backward(&self, op: &Op, node: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => unreachable!("leaves handled by backward"),
            Op::MatMul { a, b } => {
                let q = *self.shape(b).first().unwrap();
                let r = self.shape(b)[1];
                let rows = self.value(a).numel() / q;
                if let Some(da) = self.grad_buf(grads, a) {
                    kernels::matmul_grad_lhs(dy, self.data(b), da, rows, q, r);
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    kernels::matmul_grad_rhs(self.data(a), dy, db, rows, q, r);
                }
            }
            Op::BiasAdd { x, bias } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d += g;
                    }
                }
                if let Some(db) = self.grad_buf(grads, bias) {
                    let c = db.len();
                    for row in dy.chunks_exact(c) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for side in [a, b] {
                    if let Some(d) = self.grad_buf(grads, side) {
                        for (d, &g) in d.iter_mut().zip(dy) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = self.grad_buf(grads, a) {
                    for ((d, &g), &bv) in da.iter_mut().zip(dy).zip(self.data(b)) {
                        *d += g * bv;
                    }
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    for ((d, &g), &av) in db.iter_mut().zip(dy).zip(self.data(a)) {
                        *d += g * av;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d += g * factor;
                    }
                }
            }
            Op::Gelu { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(self.data(x)) {
                        *d += g * kernels::gelu_derivative(v);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let c = self.value(gain).numel();
                let rows = self.value(x).numel() / c;
                // Split mutable access: buffers live in disjoint slots.
                let need_x = self.needs(x);
                let need_gain = self.needs(gain);
                let need_bias = self.needs(bias);
                let mut dx = if need_x { Some(vec![0.0; rows * c]) } else { None };
                let mut dgain = if need_gain { Some(vec![0.0; c]) } else { None };
                let mut dbias = if need_bias { Some(vec![0.0; c]) } else { None };
                kernels::layer_norm_grad(
                    self.data(x),
                    self.data(gain),
                    dy,
                    dx.as_deref_mut(),
                    dgain.as_deref_mut(),
                    dbias.as_deref_mut(),
                    rows,
                    c,
                    eps,
                );
                for (id, delta) in [(x, dx), (gain, dgain), (bias, dbias)] {
                    if let (Some(buf), Some(delta)) = (self.grad_buf(grads, id), delta) {
                        for (d, g) in buf.iter_mut().zip(delta) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Conv2d { x, kernel, stride, pad } => {
                let xs = self.shape(x);
                let (h, w, cin) = (xs[0], xs[1], xs[2]);
                let ks = self.shape(kernel);
                let (k, cout) = (ks[0], ks[3]);
                let need_x = self.needs(x);
                let need_k = self.needs(kernel);
                let mut dx = if need_x { Some(vec![0.0; h * w * cin]) } else { None };
                let mut dk = if need_k {
                    Some(vec![0.0; k * k * cin * cout])
                } else {
                    None
                };
                kernels::conv2d_grad(
                    self.data(x),
                    self.data(kernel),
                    dy,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    (h, w, cin),
                    (k, cout),
                    stride,
                    pad,
                );
                for (id, delta) in [(x, dx), (kernel, dk)] {
                    if let (Some(buf), Some(delta)) = (self.grad_buf(grads, id), delta) {
                        for (d, g) in buf.iter_mut().zip(delta) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Rearrange { x, ref spec } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    let back = spec.inverse().apply_data(dy);
                    for (d, g) in dx.iter_mut().zip(back) {
                        *d += g;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d += g;
                    }
                }
            }
            Op::ConcatLast { ref parts } => {
                let out_last = *self.shape(TensorId(node)).last().unwrap();
                let rows = dy.len() / out_last;
                let mut offset = 0;
                for &p in parts {
                    let c = *self.shape(p).last().unwrap();
                    if let Some(dp) = self.grad_buf(grads, p) {
                        for row in 0..rows {
                            let src = &dy[row * out_last + offset..row * out_last + offset + c];
                            for (d, &g) in dp[row * c..(row + 1) * c].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Softmax { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    let s = self.data(TensorId(node));
                    let c = *self.shape(TensorId(node)).last().unwrap();
                    kernels::softmax_grad(s, dy, dx, s.len() / c, c);
                }
            }
            Op::LogSoftmax { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    let logp = self.data(TensorId(node));
                    let c = *self.shape(TensorId(node)).last().unwrap();
                    kernels::log_softmax_grad(logp, dy, dx, logp.len() / c, c);
                }
            }
            Op::MeanRows { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    let c = dy.len();
                    let rows = dx.len() / c;
                    let inv = 1.0 / rows as f64;
                    for row in dx.chunks_exact_mut(c) {
                        for (d, &g) in row.iter_mut().zip(dy) {
                            *d += g * inv;
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    let g = dy[0];
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                }
            }
        }
    }
}
