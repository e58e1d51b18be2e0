//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] is an append-only list of primitive operations. Builder methods
//! validate shapes, evaluate the primitive eagerly in f64, and record enough
//! state to run the backward pass. Node order is topological by construction.
//!
//! Determinism contract: every reduction accumulates sequentially in
//! row-major order, and gradient contributions accumulate in reverse node
//! order. Identical inputs therefore produce bitwise-identical outputs and
//! gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    BiasAddRows(NodeId, NodeId),
    BiasAddChannels(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        pad: usize,
    },
    Relu(NodeId),
    AvgPool {
        x: NodeId,
        window: usize,
    },
    Flatten(NodeId),
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ResizeBilinear {
        x: NodeId,
        oh: usize,
        ow: usize,
    },
    Pad2d {
        x: NodeId,
        top: usize,
        left: usize,
        oh: usize,
        ow: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::BiasAddRows(a, b) | Op::BiasAddChannels(a, b) => vec![a, b],
            Op::Scale(a, _) => vec![a],
            Op::Conv2d { x, kernel, .. } => vec![x, kernel],
            Op::Relu(a)
            | Op::AvgPool { x: a, .. }
            | Op::Flatten(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::GatherRows { x: a, .. }
            | Op::ResizeBilinear { x: a, .. }
            | Op::Pad2d { x: a, .. } => vec![a],
            Op::BatchNormTrain {
                x, gamma, beta, ..
            }
            | Op::BatchNormEval {
                x, gamma, beta, ..
            }
            | Op::LayerNorm {
                x, gamma, beta, ..
            } => vec![x, gamma, beta],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node that is known to participate in the result.
    pub fn expect(&self, id: NodeId) -> &Tensor {
        self.get(id).expect("no gradient recorded for node")
    }
}

/// Recorded computation supporting reverse-mode differentiation.
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check(&self, id: NodeId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::shape(op, format!("node {} not on tape", id.0)));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input tensor. Rejects non-finite values.
    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        Ok(self.push(Op::Leaf, t))
    }

    /// Records a tensor already known to be finite (validated at load or
    /// initialization time). Skips the elementwise finiteness scan.
    pub fn leaf_trusted(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    // ---- builder methods, one per primitive ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add", Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub", Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul", Op::Mul(a, b))
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: Op,
    ) -> Result<NodeId> {
        self.check(a, name)?;
        self.check(b, name)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                name,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check(x, "scale")?;
        let op = Op::Scale(x, c);
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let op = Op::Matmul(a, b);
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// `[n,m] + [m]`, broadcast over rows.
    pub fn bias_add_rows(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x, "bias_add_rows")?;
        self.check(b, "bias_add_rows")?;
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("bias_add_rows", format!("{sx:?} + {sb:?}")));
        }
        let op = Op::BiasAddRows(x, b);
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// `[n,c,h,w] + [c]`, broadcast over batch and spatial dims.
    pub fn bias_add_channels(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x, "bias_add_channels")?;
        self.check(b, "bias_add_channels")?;
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape(
                "bias_add_channels",
                format!("{sx:?} + {sb:?}"),
            ));
        }
        let op = Op::BiasAddChannels(x, b);
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// 2-D convolution, stride 1, zero padding `pad` on every side.
    /// `x: [n,ci,h,w]`, `kernel: [co,ci,kh,kw]` -> `[n,co,h+2p-kh+1,w+2p-kw+1]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, pad: usize) -> Result<NodeId> {
        self.check(x, "conv2d")?;
        self.check(kernel, "conv2d")?;
        let (sx, sk) = (self.value(x).shape(), self.value(kernel).shape());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::shape("conv2d", format!("x {sx:?}, kernel {sk:?}")));
        }
        if sx[2] + 2 * pad < sk[2] || sx[3] + 2 * pad < sk[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {sk:?} larger than padded input {sx:?} (pad={pad})"),
            ));
        }
        let op = Op::Conv2d { x, kernel, pad };
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "relu")?;
        let op = Op::Relu(x);
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Average pooling with square window and equal stride.
    pub fn avg_pool(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        self.check(x, "avg_pool")?;
        let sx = self.value(x).shape();
        if sx.len() != 4 || window == 0 || sx[2] % window != 0 || sx[3] % window != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("input {sx:?} not divisible by window {window}"),
            ));
        }
        let op = Op::AvgPool { x, window };
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// `[n,c,h,w] -> [n, c*h*w]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "flatten")?;
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(Error::shape("flatten", format!("expected 4-d, got {sx:?}")));
        }
        let op = Op::Flatten(x);
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    fn check_norm_shapes(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        name: &'static str,
    ) -> Result<usize> {
        let sx = self.value(x).shape();
        if sx.len() != 2 && sx.len() != 4 {
            return Err(Error::shape(name, format!("expected 2-d or 4-d, got {sx:?}")));
        }
        let c = sx[1];
        for id in [gamma, beta] {
            let s = self.value(id).shape();
            if s != [c] {
                return Err(Error::shape(
                    name,
                    format!("affine param shape {s:?}, expected [{c}]"),
                ));
            }
        }
        Ok(c)
    }

    /// Batch normalization with batch statistics. Also returns the biased
    /// per-channel batch mean and variance so callers can maintain running
    /// statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        self.check(x, "batch_norm_train")?;
        self.check_norm_shapes(x, gamma, beta, "batch_norm_train")?;
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            eps,
            mean: Vec::new(),
            rstd: Vec::new(),
        };
        let (op, value) = eval_op_mut(op, &self.nodes)?;
        let (mean, var) = match &op {
            Op::BatchNormTrain { mean, rstd, .. } => (
                mean.clone(),
                rstd.iter().map(|r| 1.0 / (r * r) - eps).collect(),
            ),
            _ => unreachable!(),
        };
        Ok((self.push(op, value), mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        self.check(x, "batch_norm_eval")?;
        let c = self.check_norm_shapes(x, gamma, beta, "batch_norm_eval")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm_eval",
                format!("running stats length != {c}"),
            ));
        }
        let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            rstd,
        };
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Layer normalization over all non-batch dims of each sample, with
    /// per-channel (4-d input) or per-feature (2-d input) affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.check(x, "layer_norm")?;
        self.check_norm_shapes(x, gamma, beta, "layer_norm")?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
            mean: Vec::new(),
            rstd: Vec::new(),
        };
        let (op, value) = eval_op_mut(op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Row-wise softmax on `[n,c]`.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.rowwise(x, "softmax", Op::Softmax(x))
    }

    /// Row-wise log-softmax on `[n,c]`.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.rowwise(x, "log_softmax", Op::LogSoftmax(x))
    }

    fn rowwise(&mut self, x: NodeId, name: &'static str, op: Op) -> Result<NodeId> {
        self.check(x, name)?;
        let sx = self.value(x).shape();
        if sx.len() != 2 {
            return Err(Error::shape(name, format!("expected 2-d, got {sx:?}")));
        }
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Mean over all elements -> scalar.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "mean_all")?;
        let op = Op::MeanAll(x);
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Sum over all elements -> scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "sum_all")?;
        let op = Op::SumAll(x);
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// `y[i] = x[i, idx[i]]` for `x: [n,c]`.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.check(x, "gather_rows")?;
        let sx = self.value(x).shape();
        if sx.len() != 2 || idx.len() != sx[0] || idx.iter().any(|&i| i >= sx[1]) {
            return Err(Error::shape(
                "gather_rows",
                format!("x {sx:?} with {} indices", idx.len()),
            ));
        }
        let op = Op::GatherRows {
            x,
            idx: idx.to_vec(),
        };
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Bilinear resize with half-pixel-center sampling.
    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        self.check(x, "resize_bilinear")?;
        let sx = self.value(x).shape();
        if sx.len() != 4 || oh == 0 || ow == 0 {
            return Err(Error::shape(
                "resize_bilinear",
                format!("x {sx:?} -> ({oh},{ow})"),
            ));
        }
        let op = Op::ResizeBilinear { x, oh, ow };
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Places `x` on a zero canvas of `oh x ow` at offset (top, left).
    pub fn pad2d(
        &mut self,
        x: NodeId,
        top: usize,
        left: usize,
        oh: usize,
        ow: usize,
    ) -> Result<NodeId> {
        self.check(x, "pad2d")?;
        let sx = self.value(x).shape();
        if sx.len() != 4 || top + sx[2] > oh || left + sx[3] > ow {
            return Err(Error::shape(
                "pad2d",
                format!("x {sx:?} at ({top},{left}) into ({oh},{ow})"),
            ));
        }
        let op = Op::Pad2d {
            x,
            top,
            left,
            oh,
            ow,
        };
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Reverse-mode differentiation from a scalar seed node.
    ///
    /// Returns gradients for every node on a differentiable path from a
    /// `requires_grad` leaf to the seed.
    pub fn backward(&self, seed: NodeId) -> Result<GradMap> {
        self.check(seed, "backward")?;
        if self.value(seed).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("seed must be scalar, got {:?}", self.value(seed).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::scalar(1.0));

        for i in (0..=seed.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            // Temporarily take the output gradient; put it back afterwards.
            let gout = grads[i].take().unwrap();
            self.accumulate(&self.nodes[i].op, &self.nodes[i].value, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(GradMap { grads })
    }

    /// Adds this node's vector-Jacobian product into its inputs' gradients.
    fn accumulate(&self, op: &Op, vout: &Tensor, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        // Fetch-or-init the gradient buffer for `id`, then run `body` with a
        // mutable slice over it. Each expansion borrows `grads` only for the
        // duration of its own block.
        macro_rules! with_grad {
            ($id:expr, $g:ident, $body:block) => {
                if needs($id) {
                    let entry = &mut grads[$id.0];
                    if entry.is_none() {
                        *entry = Some(Tensor::zeros(self.value($id).shape().to_vec()));
                    }
                    let $g: &mut [f64] = entry.as_mut().unwrap().data_mut();
                    $body
                }
            };
        }

        let go = gout.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, g, {
                    axpy(g, 1.0, go);
                });
                with_grad!(*b, g, {
                    axpy(g, 1.0, go);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, g, {
                    axpy(g, 1.0, go);
                });
                with_grad!(*b, g, {
                    axpy(g, -1.0, go);
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, g, {
                    for i in 0..g.len() {
                        g[i] += go[i] * vb[i];
                    }
                });
                with_grad!(*b, g, {
                    for i in 0..g.len() {
                        g[i] += go[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                with_grad!(*a, g, {
                    axpy(g, *c, go);
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, g, {
                    // da[i,l] = sum_j go[i,j] * b[l,j]
                    for i in 0..n {
                        let gr = &go[i * m..(i + 1) * m];
                        for l in 0..k {
                            let br = &vb[l * m..(l + 1) * m];
                            let mut acc = 0.0;
                            for (x, y) in gr.iter().zip(br) {
                                acc += x * y;
                            }
                            g[i * k + l] += acc;
                        }
                    }
                });
                with_grad!(*b, g, {
                    // db[l,j] += a[i,l] * go[i,j]
                    for i in 0..n {
                        let gr = &go[i * m..(i + 1) * m];
                        for l in 0..k {
                            let t = va[i * k + l];
                            let dst = &mut g[l * m..(l + 1) * m];
                            axpy(dst, t, gr);
                        }
                    }
                });
            }
            Op::BiasAddRows(x, b) => {
                let (n, m) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                with_grad!(*x, g, {
                    axpy(g, 1.0, go);
                });
                with_grad!(*b, g, {
                    for i in 0..n {
                        let gr = &go[i * m..(i + 1) * m];
                        axpy(g, 1.0, gr);
                    }
                });
            }
            Op::BiasAddChannels(x, b) => {
                let s = self.value(*x).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                with_grad!(*x, g, {
                    axpy(g, 1.0, go);
                });
                with_grad!(*b, g, {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let mut acc = 0.0;
                            for v in &go[base..base + hw] {
                                acc += v;
                            }
                            g[ch] += acc;
                        }
                    }
                });
            }
            Op::Conv2d { x, kernel, pad } => {
                let sx = self.value(*x).shape().to_vec();
                let sk = self.value(*kernel).shape().to_vec();
                let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sk[0], sk[2], sk[3]);
                let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
                let vx = self.value(*x).data();
                let vk = self.value(*kernel).data();
                with_grad!(*x, g, {
                    conv2d_backward_input(g, go, vk, n, ci, h, w, co, kh, kw, *pad, oh, ow);
                });
                with_grad!(*kernel, g, {
                    conv2d_backward_kernel(g, go, vx, n, ci, h, w, co, kh, kw, *pad, oh, ow);
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                with_grad!(*x, g, {
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            g[i] += go[i];
                        }
                    }
                });
            }
            Op::AvgPool { x, window } => {
                let s = self.value(*x).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let k = *window;
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                with_grad!(*x, g, {
                    for img in 0..n * c {
                        let ob = img * oh * ow;
                        let ib = img * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let t = go[ob + oy * ow + ox] * inv;
                                for dy in 0..k {
                                    let row = ib + (oy * k + dy) * w + ox * k;
                                    for dx in 0..k {
                                        g[row + dx] += t;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Flatten(x) => {
                with_grad!(*x, g, {
                    axpy(g, 1.0, go);
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                rstd,
                ..
            } => {
                let (dims, vx, vg) = (
                    norm_dims(self.value(*x).shape()),
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                );
                let (n, c, sp) = dims;
                let m = (n * sp) as f64;
                with_grad!(*beta, g, {
                    bn_reduce(go, n, c, sp, |_, _| 1.0, g);
                });
                with_grad!(*gamma, g, {
                    bn_reduce(
                        go,
                        n,
                        c,
                        sp,
                        |ch, i| (vx[i] - mean[ch]) * rstd[ch],
                        g,
                    );
                });
                with_grad!(*x, g, {
                    // Two reductions per channel, then the elementwise form.
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dyx = vec![0.0; c];
                    bn_reduce(go, n, c, sp, |_, _| 1.0, &mut sum_dy);
                    bn_reduce(
                        go,
                        n,
                        c,
                        sp,
                        |ch, i| (vx[i] - mean[ch]) * rstd[ch],
                        &mut sum_dyx,
                    );
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let (mu, r, ga) = (mean[ch], rstd[ch], vg[ch]);
                            let (a1, a2) = (sum_dy[ch] / m, sum_dyx[ch] / m);
                            for i in base..base + sp {
                                let xhat = (vx[i] - mu) * r;
                                g[i] += ga * r * (go[i] - a1 - xhat * a2);
                            }
                        }
                    }
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (dims, vx, vg) = (
                    norm_dims(self.value(*x).shape()),
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                );
                let (n, c, sp) = dims;
                with_grad!(*beta, g, {
                    bn_reduce(go, n, c, sp, |_, _| 1.0, g);
                });
                with_grad!(*gamma, g, {
                    bn_reduce(
                        go,
                        n,
                        c,
                        sp,
                        |ch, i| (vx[i] - mean[ch]) * rstd[ch],
                        g,
                    );
                });
                with_grad!(*x, g, {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let t = vg[ch] * rstd[ch];
                            let dst = &mut g[base..base + sp];
                            let src = &go[base..base + sp];
                            axpy(dst, t, src);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                mean,
                rstd,
                beta,
                ..
            } => {
                let (dims, vx, vg) = (
                    norm_dims(self.value(*x).shape()),
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                );
                let (n, c, sp) = dims;
                let d = (c * sp) as f64;
                with_grad!(*beta, g, {
                    bn_reduce(go, n, c, sp, |_, _| 1.0, g);
                });
                with_grad!(*gamma, g, {
                    let mut acc = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let (mu, r) = (mean[b], rstd[b]);
                            let mut s = 0.0;
                            for i in base..base + sp {
                                s += go[i] * (vx[i] - mu) * r;
                            }
                            acc[ch] += s;
                        }
                    }
                    axpy(g, 1.0, &acc);
                });
                with_grad!(*x, g, {
                    for b in 0..n {
                        let (mu, r) = (mean[b], rstd[b]);
                        // dxhat = go * gamma[ch]; two per-sample reductions.
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let ga = vg[ch];
                            for i in base..base + sp {
                                let dxh = go[i] * ga;
                                s1 += dxh;
                                s2 += dxh * (vx[i] - mu) * r;
                            }
                        }
                        let (a1, a2) = (s1 / d, s2 / d);
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let ga = vg[ch];
                            for i in base..base + sp {
                                let xhat = (vx[i] - mu) * r;
                                g[i] += r * (go[i] * ga - a1 - xhat * a2);
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let s = self.value(*x).shape();
                let (n, cdim) = (s[0], s[1]);
                // This node's value is the softmax output.
                let y = vout.data();
                with_grad!(*x, g, {
                    for i in 0..n {
                        let yr = &y[i * cdim..(i + 1) * cdim];
                        let gr = &go[i * cdim..(i + 1) * cdim];
                        let mut dot = 0.0;
                        for (a, b) in gr.iter().zip(yr) {
                            dot += a * b;
                        }
                        let dst = &mut g[i * cdim..(i + 1) * cdim];
                        for j in 0..cdim {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let s = self.value(*x).shape();
                let (n, cdim) = (s[0], s[1]);
                // softmax = exp(log_softmax); vout is the log-softmax output.
                let y: Vec<f64> = vout.data().iter().map(|v| v.exp()).collect();
                with_grad!(*x, g, {
                    for i in 0..n {
                        let yr = &y[i * cdim..(i + 1) * cdim];
                        let gr = &go[i * cdim..(i + 1) * cdim];
                        let mut sum = 0.0;
                        for v in gr {
                            sum += v;
                        }
                        let dst = &mut g[i * cdim..(i + 1) * cdim];
                        for j in 0..cdim {
                            dst[j] += gr[j] - yr[j] * sum;
                        }
                    }
                });
            }
            Op::MeanAll(x) => {
                let inv = 1.0 / self.value(*x).numel() as f64;
                with_grad!(*x, g, {
                    let t = go[0] * inv;
                    for v in g.iter_mut() {
                        *v += t;
                    }
                });
            }
            Op::SumAll(x) => {
                with_grad!(*x, g, {
                    let t = go[0];
                    for v in g.iter_mut() {
                        *v += t;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let cdim = self.value(*x).shape()[1];
                with_grad!(*x, g, {
                    for (i, &j) in idx.iter().enumerate() {
                        g[i * cdim + j] += go[i];
                    }
                });
            }
            Op::ResizeBilinear { x, oh, ow } => {
                let s = self.value(*x).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ys, xs) = (bilinear_axis(h, *oh), bilinear_axis(w, *ow));
                with_grad!(*x, g, {
                    for img in 0..n * c {
                        let ib = img * h * w;
                        let ob = img * oh * ow;
                        for oy in 0..*oh {
                            let (y0, y1, fy) = ys[oy];
                            for ox in 0..*ow {
                                let (x0, x1, fx) = xs[ox];
                                let t = go[ob + oy * ow + ox];
                                g[ib + y0 * w + x0] += t * (1.0 - fy) * (1.0 - fx);
                                g[ib + y0 * w + x1] += t * (1.0 - fy) * fx;
                                g[ib + y1 * w + x0] += t * fy * (1.0 - fx);
                                g[ib + y1 * w + x1] += t * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::Pad2d {
                x,
                top,
                left,
                oh,
                ow,
            } => {
                let s = self.value(*x).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (top, left, oh, ow) = (*top, *left, *oh, *ow);
                with_grad!(*x, g, {
                    for img in 0..n * c {
                        let ob = img * oh * ow;
                        let ib = img * h * w;
                        for y in 0..h {
                            let src = &go[ob + (top + y) * ow + left..][..w];
                            let dst = &mut g[ib + y * w..][..w];
                            axpy(dst, 1.0, src);
                        }
                    }
                });
            }
        }
    }

    /// Activation pattern: the sign (> 0) of every ReLU input on the tape,
    /// in node order. Finite-difference probes of a piecewise-linear network
    /// are valid only where this pattern is constant over the probe segment.
    pub fn relu_input_signs(&self) -> Vec<bool> {
        let mut signs = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                signs.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        signs
    }

    /// Re-executes every recorded operation from the recorded leaf values and
    /// returns the recomputed outputs. Used to test the replay invariant.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => eval_op(op, &self.nodes)?,
            };
            out.push(v);
        }
        Ok(out)
    }
}

/// `dst += t * src`, elementwise.
#[inline]
fn axpy(dst: &mut [f64], t: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += t * *s;
    }
}

/// Interprets a 2-d or 4-d shape as (batch, channels, spatial).
fn norm_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => unreachable!("norm ops validate dimensionality"),
    }
}

/// Per-channel reduction sum_{n,s} go[n,c,s] * f(c, flat_index).
fn bn_reduce<F: Fn(usize, usize) -> f64>(
    go: &[f64],
    n: usize,
    c: usize,
    sp: usize,
    f: F,
    out: &mut [f64],
) {
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * sp;
            let mut acc = 0.0;
            for i in base..base + sp {
                acc += go[i] * f(ch, i);
            }
            out[ch] += acc;
        }
    }
}

/// Precomputed (low index, high index, fraction) per output coordinate for
/// half-pixel-center bilinear sampling.
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn softmax_forward(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * c];
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            mx = mx.max(v);
        }
        let out = &mut y[i * c..(i + 1) * c];
        let mut z = 0.0;
        for j in 0..c {
            out[j] = (row[j] - mx).exp();
            z += out[j];
        }
        let inv = 1.0 / z;
        for v in out.iter_mut() {
            *v *= inv;
        }
    }
    y
}

fn log_softmax_forward(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * c];
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            mx = mx.max(v);
        }
        let mut z = 0.0;
        for &v in row {
            z += (v - mx).exp();
        }
        let lz = z.ln() + mx;
        let out = &mut y[i * c..(i + 1) * c];
        for j in 0..c {
            out[j] = row[j] - lz;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    out: &mut [f64],
    x: &[f64],
    k: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    // Shift-and-accumulate: each kernel tap contributes one shifted axpy per
    // output row. Per-output accumulation order is fixed: (ci, ky, kx)
    // ascending, columns left to right.
    for b in 0..n {
        for oc in 0..co {
            let obase = (b * co + oc) * oh * ow;
            for ic in 0..ci {
                let ibase = (b * ci + ic) * h * w;
                let kbase = (oc * ci + ic) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let tap = k[kbase + ky * kw + kx];
                        if tap == 0.0 {
                            continue;
                        }
                        // iy = oy + ky - pad in [0, h)
                        let oy_lo = pad.saturating_sub(ky);
                        let oy_hi = (h + pad - ky).min(oh);
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let ix0 = ox_lo + kx - pad;
                            let dst = &mut out[obase + oy * ow + ox_lo..][..len];
                            let src = &x[ibase + iy * w + ix0..][..len];
                            axpy(dst, tap, src);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    gx: &mut [f64],
    go: &[f64],
    k: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for b in 0..n {
        for oc in 0..co {
            let obase = (b * co + oc) * oh * ow;
            for ic in 0..ci {
                let ibase = (b * ci + ic) * h * w;
                let kbase = (oc * ci + ic) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let tap = k[kbase + ky * kw + kx];
                        if tap == 0.0 {
                            continue;
                        }
                        let oy_lo = pad.saturating_sub(ky);
                        let oy_hi = (h + pad - ky).min(oh);
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let ix0 = ox_lo + kx - pad;
                            let src = &go[obase + oy * ow + ox_lo..][..len];
                            let dst = &mut gx[ibase + iy * w + ix0..][..len];
                            axpy(dst, tap, src);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    gk: &mut [f64],
    go: &[f64],
    x: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for b in 0..n {
        for oc in 0..co {
            let obase = (b * co + oc) * oh * ow;
            for ic in 0..ci {
                let ibase = (b * ci + ic) * h * w;
                let kbase = (oc * ci + ic) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let oy_lo = pad.saturating_sub(ky);
                        let oy_hi = (h + pad - ky).min(oh);
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let ix0 = ox_lo + kx - pad;
                            let gr = &go[obase + oy * ow + ox_lo..][..len];
                            let xr = &x[ibase + iy * w + ix0..][..len];
                            for (a, b) in gr.iter().zip(xr) {
                                acc += a * b;
                            }
                        }
                        gk[kbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Evaluates an op against current node values (ops with no aux state).
fn eval_op(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let (op2, v) = eval_op_mut(op.clone(), nodes)?;
    let _ = op2;
    Ok(v)
}

/// Evaluates an op, filling in any saved auxiliary state (norm statistics).
fn eval_op_mut(mut op: Op, nodes: &[Node]) -> Result<(Op, Tensor)> {
    let val = |id: NodeId| &nodes[id.0].value;
    let out = match &mut op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => {
            let mut v = val(*a).clone();
            let d = v.data_mut();
            for (x, y) in d.iter_mut().zip(val(*b).data()) {
                *x += y;
            }
            v
        }
        Op::Sub(a, b) => {
            let mut v = val(*a).clone();
            let d = v.data_mut();
            for (x, y) in d.iter_mut().zip(val(*b).data()) {
                *x -= y;
            }
            v
        }
        Op::Mul(a, b) => {
            let mut v = val(*a).clone();
            let d = v.data_mut();
            for (x, y) in d.iter_mut().zip(val(*b).data()) {
                *x *= y;
            }
            v
        }
        Op::Scale(a, c) => {
            let mut v = val(*a).clone();
            for x in v.data_mut() {
                *x *= *c;
            }
            v
        }
        Op::Matmul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; n * m];
            let (va, vb) = (val(*a).data(), val(*b).data());
            for i in 0..n {
                let dst = &mut out[i * m..(i + 1) * m];
                for l in 0..k {
                    let t = va[i * k + l];
                    if t == 0.0 {
                        continue;
                    }
                    let src = &vb[l * m..(l + 1) * m];
                    axpy(dst, t, src);
                }
            }
            Tensor::new(vec![n, m], out)?
        }
        Op::BiasAddRows(x, b) => {
            let s = val(*x).shape();
            let (n, m) = (s[0], s[1]);
            let mut v = val(*x).clone();
            let d = v.data_mut();
            let bias = val(*b).data();
            for i in 0..n {
                let row = &mut d[i * m..(i + 1) * m];
                for (r, bv) in row.iter_mut().zip(bias) {
                    *r += bv;
                }
            }
            v
        }
        Op::BiasAddChannels(x, b) => {
            let s = val(*x).shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let mut v = val(*x).clone();
            let d = v.data_mut();
            let bias = val(*b).data();
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    let bv = bias[ch];
                    for r in &mut d[base..base + hw] {
                        *r += bv;
                    }
                }
            }
            v
        }
        Op::Conv2d { x, kernel, pad } => {
            let (sx, sk) = (val(*x).shape(), val(*kernel).shape());
            let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
            let (co, kh, kw) = (sk[0], sk[2], sk[3]);
            let (oh, ow) = (h + 2 * *pad - kh + 1, w + 2 * *pad - kw + 1);
            let mut out = vec![0.0; n * co * oh * ow];
            conv2d_forward(
                &mut out,
                val(*x).data(),
                val(*kernel).data(),
                n,
                ci,
                h,
                w,
                co,
                kh,
                kw,
                *pad,
                oh,
                ow,
            );
            Tensor::new(vec![n, co, oh, ow], out)?
        }
        Op::Relu(x) => {
            let mut v = val(*x).clone();
            for r in v.data_mut() {
                if *r < 0.0 {
                    *r = 0.0;
                }
            }
            v
        }
        Op::AvgPool { x, window } => {
            let s = val(*x).shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let k = *window;
            let (oh, ow) = (h / k, w / k);
            let inv = 1.0 / (k * k) as f64;
            let mut out = vec![0.0; n * c * oh * ow];
            let d = val(*x).data();
            for img in 0..n * c {
                let ib = img * h * w;
                let ob = img * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            let row = ib + (oy * k + dy) * w + ox * k;
                            for dx in 0..k {
                                acc += d[row + dx];
                            }
                        }
                        out[ob + oy * ow + ox] = acc * inv;
                    }
                }
            }
            Tensor::new(vec![n, c, oh, ow], out)?
        }
        Op::Flatten(x) => {
            let s = val(*x).shape();
            val(*x).reshaped(vec![s[0], s[1] * s[2] * s[3]])?
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            eps,
            mean,
            rstd,
        } => {
            let (n, c, sp) = norm_dims(val(*x).shape());
            let m = (n * sp) as f64;
            let d = val(*x).data();
            let mut mu = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * sp;
                    let mut acc = 0.0;
                    for &v in &d[base..base + sp] {
                        acc += v;
                    }
                    mu[ch] += acc;
                }
            }
            for v in mu.iter_mut() {
                *v /= m;
            }
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * sp;
                    let mut acc = 0.0;
                    for &v in &d[base..base + sp] {
                        let t = v - mu[ch];
                        acc += t * t;
                    }
                    var[ch] += acc;
                }
            }
            for v in var.iter_mut() {
                *v /= m;
            }
            let rs: Vec<f64> = var.iter().map(|v| 1.0 / (v + *eps).sqrt()).collect();
            let (vg, vb) = (val(*gamma).data(), val(*beta).data());
            let mut out = vec![0.0; d.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * sp;
                    let (m0, r, ga, be) = (mu[ch], rs[ch], vg[ch], vb[ch]);
                    for i in base..base + sp {
                        out[i] = ga * (d[i] - m0) * r + be;
                    }
                }
            }
            *mean = mu;
            *rstd = rs;
            Tensor::new(val(*x).shape().to_vec(), out)?
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let (n, c, sp) = norm_dims(val(*x).shape());
            let d = val(*x).data();
            let (vg, vb) = (val(*gamma).data(), val(*beta).data());
            let mut out = vec![0.0; d.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * sp;
                    let (m0, r, ga, be) = (mean[ch], rstd[ch], vg[ch], vb[ch]);
                    for i in base..base + sp {
                        out[i] = ga * (d[i] - m0) * r + be;
                    }
                }
            }
            Tensor::new(val(*x).shape().to_vec(), out)?
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
            mean,
            rstd,
        } => {
            let (n, c, sp) = norm_dims(val(*x).shape());
            let dd = (c * sp) as f64;
            let d = val(*x).data();
            let mut mu = vec![0.0; n];
            let mut rs = vec![0.0; n];
            for b in 0..n {
                let base = b * c * sp;
                let mut acc = 0.0;
                for &v in &d[base..base + c * sp] {
                    acc += v;
                }
                let m0 = acc / dd;
                let mut var = 0.0;
                for &v in &d[base..base + c * sp] {
                    let t = v - m0;
                    var += t * t;
                }
                var /= dd;
                mu[b] = m0;
                rs[b] = 1.0 / (var + *eps).sqrt();
            }
            let (vg, vb) = (val(*gamma).data(), val(*beta).data());
            let mut out = vec![0.0; d.len()];
            for b in 0..n {
                let (m0, r) = (mu[b], rs[b]);
                for ch in 0..c {
                    let base = (b * c + ch) * sp;
                    let (ga, be) = (vg[ch], vb[ch]);
                    for i in base..base + sp {
                        out[i] = ga * (d[i] - m0) * r + be;
                    }
                }
            }
            *mean = mu;
            *rstd = rs;
            Tensor::new(val(*x).shape().to_vec(), out)?
        }
        Op::Softmax(x) => {
            let s = val(*x).shape();
            Tensor::new(
                s.to_vec(),
                softmax_forward(val(*x).data(), s[0], s[1]),
            )?
        }
        Op::LogSoftmax(x) => {
            let s = val(*x).shape();
            Tensor::new(
                s.to_vec(),
                log_softmax_forward(val(*x).data(), s[0], s[1]),
            )?
        }
        Op::MeanAll(x) => {
            let d = val(*x).data();
            let mut acc = 0.0;
            for &v in d {
                acc += v;
            }
            Tensor::scalar(acc / d.len() as f64)
        }
        Op::SumAll(x) => {
            let d = val(*x).data();
            let mut acc = 0.0;
            for &v in d {
                acc += v;
            }
            Tensor::scalar(acc)
        }
        Op::GatherRows { x, idx } => {
            let c = val(*x).shape()[1];
            let d = val(*x).data();
            let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
            Tensor::new(vec![idx.len()], out)?
        }
        Op::ResizeBilinear { x, oh, ow } => {
            let s = val(*x).shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (ys, xs) = (bilinear_axis(h, *oh), bilinear_axis(w, *ow));
            let d = val(*x).data();
            let mut out = vec![0.0; n * c * *oh * *ow];
            for img in 0..n * c {
                let ib = img * h * w;
                let ob = img * *oh * *ow;
                for oy in 0..*oh {
                    let (y0, y1, fy) = ys[oy];
                    for ox in 0..*ow {
                        let (x0, x1, fx) = xs[ox];
                        let a = d[ib + y0 * w + x0];
                        let b = d[ib + y0 * w + x1];
                        let c2 = d[ib + y1 * w + x0];
                        let e = d[ib + y1 * w + x1];
                        out[ob + oy * *ow + ox] = (1.0 - fy) * ((1.0 - fx) * a + fx * b)
                            + fy * ((1.0 - fx) * c2 + fx * e);
                    }
                }
            }
            Tensor::new(vec![n, c, *oh, *ow], out)?
        }
        Op::Pad2d {
            x,
            top,
            left,
            oh,
            ow,
        } => {
            let s = val(*x).shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let d = val(*x).data();
            let mut out = vec![0.0; n * c * *oh * *ow];
            for img in 0..n * c {
                let ib = img * h * w;
                let ob = img * *oh * *ow;
                for y in 0..h {
                    let src = &d[ib + y * w..ib + y * w + w];
                    let dst = &mut out[ob + (*top + y) * *ow + *left..][..w];
                    dst.copy_from_slice(src);
                }
            }
            Tensor::new(vec![n, c, *oh, *ow], out)?
        }
    };
    Ok((op, out))
}

/// Central-difference gradient of a scalar function of a flat vector.
///
/// Independent oracle for [`Tape::backward`]: evaluates `fn` only, never the
/// tape's reverse pass.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::InvalidConfig(format!("finite_diff step h={h}")));
    }
    let mut p = point.to_vec();
    let mut g = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i2 = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = tape.matmul(a, i2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_of_sum_square() {
        // d/dx sum(x*x) at [1,2] = [2,4]
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.expect(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.5; 6]).with_grad()).unwrap();
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.expect(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad()).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_offtape_node() {
        let tape = Tape::new();
        assert!(tape.backward(NodeId(3)).is_err());
    }

    #[test]
    fn leaf_rejects_nan() {
        let mut tape = Tape::new();
        let bad = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(matches!(tape.leaf(bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn finite_diff_on_square() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_on_constant_is_zero() {
        let g = finite_diff_grad(|_| 7.5, &[1.0, -2.0, 0.3], 1e-4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_on_sine() {
        let g = finite_diff_grad(|p| p[0].sin(), &[0.0], 1e-4).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        assert!(finite_diff_grad(|p| p[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn replay_reproduces_outputs_bitwise() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(t(&[1, 1, 4, 4], &(0..16).map(|i| i as f64 * 0.31).collect::<Vec<_>>()).with_grad())
            .unwrap();
        let k = tape
            .leaf(t(&[2, 1, 3, 3], &(0..18).map(|i| (i as f64 - 9.0) * 0.1).collect::<Vec<_>>()))
            .unwrap();
        let c = tape.conv2d(x, k, 1).unwrap();
        let r = tape.relu(c).unwrap();
        let p = tape.avg_pool(r, 2).unwrap();
        let f = tape.flatten(p).unwrap();
        let s = tape.sum_all(f).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v.data(), tape.value(NodeId(i)).data(), "node {i}");
        }
        let _ = s;
    }

    #[test]
    fn gradient_accumulation_is_commutative_for_two_branches() {
        // f = sum(x .* w1), g = sum(x .* w2); backward(a*f + b*g) must equal
        // a*grad(f) + b*grad(g) exactly when each branch touches x once.
        let xv = t(&[3], &[0.3, -1.2, 2.2]);
        let w1 = t(&[3], &[0.7, 0.1, -0.4]);
        let w2 = t(&[3], &[-1.1, 0.9, 0.2]);
        let (a, b) = (1.7, -0.6);

        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone().with_grad()).unwrap();
        let c1 = tape.leaf(w1.clone()).unwrap();
        let c2 = tape.leaf(w2.clone()).unwrap();
        let m1 = tape.mul(x, c1).unwrap();
        let f = tape.sum_all(m1).unwrap();
        let m2 = tape.mul(x, c2).unwrap();
        let g = tape.sum_all(m2).unwrap();
        let fa = tape.scale(f, a).unwrap();
        let gb = tape.scale(g, b).unwrap();
        let h = tape.add(fa, gb).unwrap();
        let grads = tape.backward(h).unwrap();
        let combined = grads.expect(x).data().to_vec();

        let expected: Vec<f64> = w1
            .data()
            .iter()
            .zip(w2.data())
            .map(|(u, v)| b * v + a * u)
            .collect();
        assert_eq!(combined, expected);
    }
}
