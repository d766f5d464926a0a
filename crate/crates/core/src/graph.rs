//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Values are computed eagerly as operations are recorded, so the tape is in
//! topological order by construction. `backward` walks it once in reverse,
//! accumulating gradients additively across fan-out. Nodes that cannot reach
//! a `requires_grad` leaf are skipped during the sweep.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::two_wam::{self, FuseCoeffs};

/// Clamp applied to predictions before the logarithms in the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Conv2d { input: NodeId, kernels: NodeId, bias: NodeId, stride: usize, padding: usize },
    GlobalAvgPool { a: NodeId },
    Dense { input: NodeId, weights: NodeId, bias: NodeId },
    BceLoss { pred: NodeId, label: f64 },
    /// Mask entries are 0 or 1/(1-rate), fixed at forward time.
    Dropout { a: NodeId, mask: Vec<f64> },
    TwoWam { features: NodeId, alpha: NodeId, beta: NodeId, c: f64 },
    ChannelMask { features: NodeId, map: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    /// True when some `requires_grad` leaf is reachable below this node.
    active: bool,
}

/// The compute graph: an append-only tape of eagerly evaluated operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Output coordinates `o` in `[0, out_len)` for which `o*stride + k_off - pad`
/// lands inside `[0, in_len)`.
fn conv_span(in_len: usize, out_len: usize, k_off: usize, pad: usize, stride: usize) -> (usize, usize) {
    let start = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi = in_len - 1 + pad;
    if hi < k_off {
        return (0, 0);
    }
    let end = ((hi - k_off) / stride + 1).min(out_len);
    (start.min(end), end)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf. Its `requires_grad` flag decides whether
    /// gradients are tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let active = value.requires_grad;
        self.push(Op::Leaf, value, active)
    }

    pub fn leaf_ref(&mut self, value: &Tensor) -> NodeId {
        self.leaf(value.clone())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to this node, if the
    /// node took part in that sweep.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor, active: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, active });
        id
    }

    fn push_op(&mut self, op: Op, value: Tensor, parents: &[NodeId]) -> NodeId {
        let active = parents.iter().any(|p| self.nodes[p.0].active);
        self.push(op, value, active)
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Add { a, b }, value, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Mul { a, b }, value, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push_op(Op::Scale { a, factor }, value, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push_op(Op::Sum { a }, Tensor::scalar(total), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push_op(Op::Mean { a }, Tensor::scalar(m), &[a])
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        match kind {
            Activation::Relu => self.relu(a),
            Activation::Sigmoid => self.sigmoid(a),
        }
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push_op(Op::Relu { a }, value, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push_op(Op::Sigmoid { a }, value, &[a])
    }

    /// 2-D cross-correlation of a `[c_in, h, w]` input with `[c_out, c_in, kh, kw]`
    /// kernels plus a `[c_out]` bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let in_shape = self.value(input).shape().to_vec();
        let k_shape = self.value(kernels).shape().to_vec();
        let b_shape = self.value(bias).shape().to_vec();
        if in_shape.len() != 3 {
            return Err(Error::dimension(format!(
                "conv2d input must be [c_in, h, w], got {in_shape:?}"
            )));
        }
        if k_shape.len() != 4 {
            return Err(Error::dimension(format!(
                "conv2d kernels must be [c_out, c_in, kh, kw], got {k_shape:?}"
            )));
        }
        let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (c_out, kc, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
        if kc != c_in {
            return Err(Error::dimension(format!(
                "conv2d channel axis: input has {c_in} channels, kernels expect {kc}"
            )));
        }
        if b_shape != [c_out] {
            return Err(Error::dimension(format!(
                "conv2d bias axis: expected [{c_out}], got {b_shape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::validation("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * padding {
            return Err(Error::dimension(format!(
                "conv2d height axis: kernel {kh} exceeds padded input {}",
                h + 2 * padding
            )));
        }
        if kw > w + 2 * padding {
            return Err(Error::dimension(format!(
                "conv2d width axis: kernel {kw} exceeds padded input {}",
                w + 2 * padding
            )));
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;

        let geom = ConvGeom { c_in, h, w, c_out, kh, kw, h_out, w_out, stride, padding };
        let col = im2col(self.value(input).data(), &geom);
        let k_data = self.value(kernels).data();
        let b_data = self.value(bias).data();
        let n = h_out * w_out;
        let mut out = vec![0.0; c_out * n];
        for co in 0..c_out {
            for v in &mut out[co * n..(co + 1) * n] {
                *v = b_data[co];
            }
        }
        matmul_acc(&mut out, k_data, &col, c_out, geom.patch_len(), n);
        let value = Tensor::new(vec![c_out, h_out, w_out], out)?;
        Ok(self.push_op(
            Op::Conv2d { input, kernels, bias, stride, padding },
            value,
            &[input, kernels, bias],
        ))
    }

    /// Mean over each h×w plane of a `[c, h, w]` tensor, producing `[c]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let shape = va.shape();
        if shape.len() != 3 {
            return Err(Error::dimension(format!(
                "global_avg_pool expects [c, h, w], got {shape:?}"
            )));
        }
        let (c, plane) = (shape[0], shape[1] * shape[2]);
        let data = va.data();
        let out: Vec<f64> = (0..c)
            .map(|ci| data[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![c], out)?;
        Ok(self.push_op(Op::GlobalAvgPool { a }, value, &[a]))
    }

    /// `weights[m, n] * input[n] + bias[m]`.
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        if x.shape().len() != 1 || w.shape().len() != 2 || b.shape().len() != 1 {
            return Err(Error::dimension(format!(
                "dense expects input [n], weights [m, n], bias [m]; got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (m, n) = (w.shape()[0], w.shape()[1]);
        if x.shape()[0] != n {
            return Err(Error::dimension(format!(
                "dense input axis: weights expect {n}, input has {}",
                x.shape()[0]
            )));
        }
        if b.shape()[0] != m {
            return Err(Error::dimension(format!(
                "dense bias axis: expected {m}, got {}",
                b.shape()[0]
            )));
        }
        let xd = x.data();
        let wd = w.data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                b.data()[i]
                    + wd[i * n..(i + 1) * n]
                        .iter()
                        .zip(xd)
                        .map(|(wv, xv)| wv * xv)
                        .sum::<f64>()
            })
            .collect();
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push_op(Op::Dense { input, weights, bias }, value, &[input, weights, bias]))
    }

    /// Binary cross-entropy of a scalar prediction against a 0/1 label.
    /// The prediction is clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logs.
    pub fn bce_loss(&mut self, pred: NodeId, label: f64) -> Result<NodeId> {
        if label != 0.0 && label != 1.0 {
            return Err(Error::validation(format!(
                "bce label must be 0 or 1, got {label}"
            )));
        }
        let p = self.value(pred).item()?;
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln());
        Ok(self.push_op(Op::BceLoss { pred, label }, Tensor::scalar(loss), &[pred]))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`; in
    /// inference mode this is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        a: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::validation(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let va = self.value(a);
        let n = va.numel();
        let mask: Vec<f64> = if training && rate > 0.0 {
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; n]
        };
        let data: Vec<f64> = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Dropout { a, mask }, value, &[a]))
    }

    /// Two-WAM fusion of `[k, h, w]` features with `[k]` alpha/beta weights
    /// into an `[h, w]` map. Differentiable in features, alpha, and beta.
    pub fn two_wam(
        &mut self,
        features: NodeId,
        alpha: NodeId,
        beta: NodeId,
        c: f64,
    ) -> Result<NodeId> {
        if !(c > 0.0) {
            return Err(Error::validation(format!("two-wam base c must be positive, got {c}")));
        }
        let f = self.value(features);
        let shape = f.shape();
        if shape.len() != 3 {
            return Err(Error::dimension(format!(
                "two-wam features must be [k, h, w], got {shape:?}"
            )));
        }
        let (k, h, w) = (shape[0], shape[1], shape[2]);
        let a = self.value(alpha);
        let b = self.value(beta);
        if a.shape() != [k] || b.shape() != [k] {
            return Err(Error::dimension(format!(
                "two-wam weight axis: features have {k} maps, alpha {:?}, beta {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let FuseCoeffs { aw, d } = two_wam::fuse_coeffs(a.data(), b.data(), c);
        let plane = h * w;
        let fd = f.data();
        let mut out = vec![0.0; plane];
        for (j, &awj) in aw.iter().enumerate() {
            let fj = &fd[j * plane..(j + 1) * plane];
            for (o, &v) in out.iter_mut().zip(fj) {
                *o += awj * v;
            }
        }
        for o in &mut out {
            *o /= d;
        }
        let value = Tensor::new(vec![h, w], out)?;
        Ok(self.push_op(
            Op::TwoWam { features, alpha, beta, c },
            value,
            &[features, alpha, beta],
        ))
    }

    /// Multiplies every channel of `[k, h, w]` features by an `[h, w]` map.
    pub fn channel_mask(&mut self, features: NodeId, map: NodeId) -> Result<NodeId> {
        let f = self.value(features);
        let m = self.value(map);
        let fs = f.shape();
        if fs.len() != 3 {
            return Err(Error::dimension(format!(
                "channel_mask features must be [k, h, w], got {fs:?}"
            )));
        }
        let (k, h, w) = (fs[0], fs[1], fs[2]);
        if m.shape() != [h, w] {
            return Err(Error::dimension(format!(
                "channel_mask map must be [{h}, {w}], got {:?}",
                m.shape()
            )));
        }
        let plane = h * w;
        let fd = f.data();
        let md = m.data();
        let mut out = vec![0.0; k * plane];
        for j in 0..k {
            for p in 0..plane {
                out[j * plane + p] = fd[j * plane + p] * md[p];
            }
        }
        let value = Tensor::new(vec![k, h, w], out)?;
        Ok(self.push_op(Op::ChannelMask { features, map }, value, &[features, map]))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients end up on every node that
    /// participated, readable through [`Tape::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::state("backward called with a root from another tape"));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::validation(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].active {
                self.dispatch(i, &g, &mut grads);
            }
            self.nodes[i].value.grad = Some(g);
        }
        // Leaves that require gradients but never saw the root get zeros.
        for node in &mut self.nodes {
            if node.value.requires_grad && node.value.grad.is_none() {
                let numel = node.value.numel();
                node.value.grad = Some(vec![0.0; numel]);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, delta: &[f64]) {
        if !self.nodes[target.0].active {
            return;
        }
        let slot = &mut grads[target.0];
        match slot {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn dispatch(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = g.iter().map(|g| g * factor).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, &da);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                let da = vec![g[0] / n as f64; n];
                self.accumulate(grads, *a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Conv2d { input, kernels, bias, stride, padding } => {
                self.conv2d_backward(*input, *kernels, *bias, *stride, *padding, i, g, grads);
            }
            Op::GlobalAvgPool { a } => {
                let shape = self.value(*a).shape();
                let (c, plane) = (shape[0], shape[1] * shape[2]);
                let mut da = vec![0.0; c * plane];
                for ci in 0..c {
                    let gv = g[ci] / plane as f64;
                    for v in &mut da[ci * plane..(ci + 1) * plane] {
                        *v += gv;
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Dense { input, weights, bias } => {
                let x = self.value(*input).data();
                let wt = self.value(*weights);
                let (m, n) = (wt.shape()[0], wt.shape()[1]);
                let wd = wt.data();
                let mut dx = vec![0.0; n];
                let mut dw = vec![0.0; m * n];
                for mi in 0..m {
                    let gv = g[mi];
                    for ni in 0..n {
                        dx[ni] += gv * wd[mi * n + ni];
                        dw[mi * n + ni] = gv * x[ni];
                    }
                }
                self.accumulate(grads, *input, &dx);
                self.accumulate(grads, *weights, &dw);
                self.accumulate(grads, *bias, g);
            }
            Op::BceLoss { pred, label } => {
                let p = self.value(*pred).data()[0].clamp(BCE_EPS, 1.0 - BCE_EPS);
                let dp = g[0] * (-label / p + (1.0 - label) / (1.0 - p));
                self.accumulate(grads, *pred, &[dp]);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::TwoWam { features, alpha, beta, c } => {
                let f = self.value(*features);
                let (k, plane) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
                let fd = f.data();
                let al = self.value(*alpha).data();
                let be = self.value(*beta).data();
                let FuseCoeffs { aw, d } = two_wam::fuse_coeffs(al, be, *c);
                let t = self.nodes[i].value.data();
                let ln_c = c.ln();

                let mut df = vec![0.0; k * plane];
                let mut dalpha = vec![0.0; k];
                let mut dbeta = vec![0.0; k];
                for j in 0..k {
                    let fj = &fd[j * plane..(j + 1) * plane];
                    let powc = c.powf(be[j]);
                    let dfj = aw[j] / d;
                    let mut acc_a = 0.0;
                    for p in 0..plane {
                        let gp = g[p];
                        df[j * plane + p] = gp * dfj;
                        acc_a += gp * (fj[p] - t[p]);
                    }
                    dalpha[j] = acc_a * powc / d;
                    dbeta[j] = acc_a * ln_c * al[j] * powc / d;
                }
                self.accumulate(grads, *features, &df);
                self.accumulate(grads, *alpha, &dalpha);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::ChannelMask { features, map } => {
                let f = self.value(*features);
                let (k, plane) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
                let fd = f.data();
                let md = self.value(*map).data();
                let mut df = vec![0.0; k * plane];
                let mut dm = vec![0.0; plane];
                for j in 0..k {
                    for p in 0..plane {
                        let gv = g[j * plane + p];
                        df[j * plane + p] = gv * md[p];
                        dm[p] += gv * fd[j * plane + p];
                    }
                }
                self.accumulate(grads, *features, &df);
                self.accumulate(grads, *map, &dm);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
        out_node: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let in_t = self.value(input);
        let k_t = self.value(kernels);
        let (c_in, h, w) = (in_t.shape()[0], in_t.shape()[1], in_t.shape()[2]);
        let (c_out, kh, kw) = (k_t.shape()[0], k_t.shape()[2], k_t.shape()[3]);
        let out_shape = self.nodes[out_node].value.shape();
        let (h_out, w_out) = (out_shape[1], out_shape[2]);
        let geom = ConvGeom { c_in, h, w, c_out, kh, kw, h_out, w_out, stride, padding };
        let k_data = k_t.data();
        let n = h_out * w_out;
        let pl = geom.patch_len();

        let want_input = self.nodes[input.0].active;
        let want_kernels = self.nodes[kernels.0].active;
        let want_bias = self.nodes[bias.0].active;

        if want_bias {
            let mut d_b = vec![0.0; c_out];
            for co in 0..c_out {
                d_b[co] = g[co * n..(co + 1) * n].iter().sum();
            }
            self.accumulate(grads, bias, &d_b);
        }
        if want_kernels {
            // dK[co, l] = dot(g row co, col row l)
            let col = im2col(in_t.data(), &geom);
            let mut d_k = vec![0.0; c_out * pl];
            for co in 0..c_out {
                let grow = &g[co * n..(co + 1) * n];
                for l in 0..pl {
                    d_k[co * pl + l] = dot(grow, &col[l * n..(l + 1) * n]);
                }
            }
            self.accumulate(grads, kernels, &d_k);
        }
        if want_input {
            // dCol[l] = sum_co K[co, l] * g[co], then scatter back to the image
            let mut d_col = vec![0.0; pl * n];
            for co in 0..c_out {
                let grow = &g[co * n..(co + 1) * n];
                for l in 0..pl {
                    let kv = k_data[co * pl + l];
                    let drow = &mut d_col[l * n..(l + 1) * n];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += kv * gv;
                    }
                }
            }
            let mut d_in = vec![0.0; c_in * h * w];
            col2im_add(&d_col, &mut d_in, &geom);
            self.accumulate(grads, input, &d_in);
        }
    }
}

/// Shapes of one conv2d application.
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Unrolls conv patches into a `[c_in*kh*kw, h_out*w_out]` matrix, zeros in
/// the padding region.
fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.h_out * g.w_out;
    let mut col = vec![0.0; g.patch_len() * n];
    for ci in 0..g.c_in {
        let in_plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = conv_span(g.h, g.h_out, ky, g.padding, g.stride);
            for kx in 0..g.kw {
                let (ox0, ox1) = conv_span(g.w, g.w_out, kx, g.padding, g.stride);
                if ox0 >= ox1 {
                    continue;
                }
                let l = (ci * g.kh + ky) * g.kw + kx;
                let crow = &mut col[l * n..(l + 1) * n];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let ix0 = ox0 * g.stride + kx - g.padding;
                    let src = &in_plane[iy * g.w + ix0..];
                    let dst = &mut crow[oy * g.w_out + ox0..oy * g.w_out + ox1];
                    if g.stride == 1 {
                        dst.copy_from_slice(&src[..dst.len()]);
                    } else {
                        for (d, s) in dst.iter_mut().zip(src.iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adds the column-matrix gradient back onto the image layout (inverse of
/// [`im2col`], accumulating across overlapping patches).
fn col2im_add(col: &[f64], input_grad: &mut [f64], g: &ConvGeom) {
    let n = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        let in_plane = &mut input_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = conv_span(g.h, g.h_out, ky, g.padding, g.stride);
            for kx in 0..g.kw {
                let (ox0, ox1) = conv_span(g.w, g.w_out, kx, g.padding, g.stride);
                if ox0 >= ox1 {
                    continue;
                }
                let l = (ci * g.kh + ky) * g.kw + kx;
                let crow = &col[l * n..(l + 1) * n];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let ix0 = ox0 * g.stride + kx - g.padding;
                    let src = &crow[oy * g.w_out + ox0..oy * g.w_out + ox1];
                    let dst = &mut in_plane[iy * g.w + ix0..];
                    if g.stride == 1 {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (d, &s) in dst.iter_mut().step_by(g.stride).zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop is not
/// serialized on one add chain. Summation order is fixed, so results stay
/// deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (a4, a_tail) = a.split_at(a.len() - a.len() % 4);
    let (b4, b_tail) = b.split_at(a4.len());
    for (ac, bc) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += ac[0] * bc[0];
        acc[1] += ac[1] * bc[1];
        acc[2] += ac[2] * bc[2];
        acc[3] += ac[3] * bc[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_tail.iter().zip(b_tail) {
        s += x * y;
    }
    s
}

/// `C[m×n] += A[m×k] * B[k×n]`, row-major.
fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn conv_scalar_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv_hand_cross_correlation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..25).map(|v| v as f64 * 0.3 - 2.0).collect();
        let x = tape.leaf(Tensor::new(vec![1, 5, 5], data.clone()).unwrap());
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0; // center of the 3x3 kernel
        let k = tape.leaf(Tensor::new(vec![1, 1, 3, 3], kd).unwrap());
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 4, 4]).unwrap());
        let k = tape.leaf(Tensor::zeros(vec![1, 3, 3, 3]).unwrap());
        let b = tape.leaf(Tensor::zeros(vec![1]).unwrap());
        let err = tape.conv2d(x, k, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channel"));
        let big = tape.leaf(Tensor::zeros(vec![1, 2, 5, 5]).unwrap());
        let err = tape.conv2d(x, big, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("height"));
    }

    /// Shape formula and values against a naive sliding-window oracle over a
    /// small grid of every geometry parameter.
    #[test]
    fn conv_matches_brute_force_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &h in &[1usize, 2, 3, 5, 7] {
            for &w in &[1usize, 2, 3, 4, 6] {
                for &kh in &[1usize, 2, 3, 4, 5] {
                    for &kw in &[1usize, 2, 3, 4, 5] {
                        for &stride in &[1usize, 2, 3, 4, 5] {
                            for &pad in &[0usize, 1, 2, 3, 4] {
                                if kh > h + 2 * pad || kw > w + 2 * pad {
                                    continue;
                                }
                                conv_case(h, w, kh, kw, stride, pad, &mut rng);
                            }
                        }
                    }
                }
            }
        }
    }

    fn conv_case(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) {
        use rand::Rng;
        let x: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>() - 0.5).collect();
        let k: Vec<f64> = (0..kh * kw).map(|_| rng.random::<f64>() - 0.5).collect();
        let bias = rng.random::<f64>();
        let mut tape = Tape::new();
        let xn = tape.leaf(Tensor::new(vec![1, h, w], x.clone()).unwrap());
        let kn = tape.leaf(Tensor::new(vec![1, 1, kh, kw], k.clone()).unwrap());
        let bn = tape.leaf(Tensor::new(vec![1], vec![bias]).unwrap());
        let y = tape.conv2d(xn, kn, bn, stride, pad).unwrap();

        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        assert_eq!(tape.value(y).shape(), &[1, h_out, w_out]);

        // independent oracle: per-pixel loop with explicit bounds checks
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            acc += x[iy as usize * w + ix as usize] * k[ky * kw + kx];
                        }
                    }
                }
                let got = tape.value(y).data()[oy * w_out + ox];
                assert!(
                    (got - acc).abs() < 1e-12,
                    "conv mismatch at ({oy},{ox}) for h={h} w={w} kh={kh} kw={kw} s={stride} p={pad}"
                );
            }
        }
    }

    #[test]
    fn gap_means_planes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.leaf(Tensor::full(vec![3, 4, 4], 2.5).unwrap());
        let y = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 2.5, 2.5]);

        let z = tape.leaf(Tensor::zeros(vec![1, 3, 3]).unwrap());
        let y = tape.global_avg_pool(z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);

        let flat = tape.leaf(Tensor::zeros(vec![4]).unwrap());
        assert!(tape.global_avg_pool(flat).is_err());
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let eye = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero_b = tape.leaf(Tensor::zeros(vec![2]).unwrap());
        let y = tape.dense(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);

        let zeros = tape.leaf(Tensor::zeros(vec![2, 2]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let y = tape.dense(x, zeros, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5]);

        let ones = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.dense(ones, w, zero_b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);

        let short = tape.leaf(Tensor::zeros(vec![3]).unwrap());
        assert!(tape.dense(short, w, zero_b).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.activation(x, Activation::Relu);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.activation(z, Activation::Sigmoid);
        assert_eq!(tape.value(s).data(), &[0.5]);

        let l3 = tape.leaf(Tensor::scalar(3.0f64.ln()));
        let s = tape.sigmoid(l3);
        assert!((tape.value(s).data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let half = tape.leaf(Tensor::scalar(0.5));
        let l = tape.bce_loss(half, 1.0).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let near_one = tape.leaf(Tensor::scalar(1.0 - BCE_EPS));
        let l = tape.bce_loss(near_one, 1.0).unwrap();
        assert!(tape.value(l).item().unwrap() <= 1.1e-7);

        let tiny = tape.leaf(Tensor::scalar(BCE_EPS));
        let l = tape.bce_loss(tiny, 1.0).unwrap();
        assert!((tape.value(l).item().unwrap() - (1.0 / BCE_EPS).ln()).abs() < 1e-6);

        assert!(tape.bce_loss(half, 0.5).is_err());
    }

    #[test]
    fn dropout_identity_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, -4.0]).unwrap());
        let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let y = tape.dropout(x, 0.7, false, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let n = 100_000;
        let x = tape.leaf(Tensor::full(vec![n], 1.0).unwrap());
        let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(vec![1], vec![3.0]));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(vec![2, 3], vec![0.0; 6]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn fanout_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(vec![1], vec![5.0]));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_demands_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(vec![2], vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn backward_foreign_root_is_state_error() {
        let mut tape = Tape::new();
        let err = tape.backward(NodeId(3)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn disconnected_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(vec![1], vec![1.0]));
        let unused = tape.leaf(param(vec![2], vec![1.0, 1.0]));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn deterministic_forward_given_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut tape = Tape::new();
            let x = tape.leaf(param(vec![8], (0..8).map(|i| i as f64 * 0.1).collect()));
            let d = tape.dropout(x, 0.3, true, &mut rng).unwrap();
            let s = tape.sum(d);
            tape.backward(s).unwrap();
            (
                tape.value(d).data().to_vec(),
                tape.grad(x).unwrap().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
