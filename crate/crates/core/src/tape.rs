//! Reverse-mode automatic differentiation over a computation tape.
//!
//! Operations are recorded in topological order during the forward pass; a
//! single reverse traversal propagates gradients through every recorded node.
//! Leaf gradients persist across `backward` calls and accumulate; interior
//! gradients are scratch space reset on every call.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    DepthwiseConv2d { input: usize, kernels: usize },
    PointwiseConv2d { input: usize, weights: usize, bias: usize },
    Relu { input: usize },
    MaxPool2d { input: usize, argmax: Vec<usize> },
    Dense { input: usize, weights: usize, bias: usize },
    /// Cross-stitch output fed back to the first branch: `a_rr·x_r + a_rd·x_d`.
    StitchR { x_r: usize, x_d: usize, alphas: usize },
    /// Cross-stitch output fed back to the second branch: `a_dr·x_r + a_dd·x_d`.
    StitchD { x_r: usize, x_d: usize, alphas: usize },
    Flatten { input: usize },
    ConcatFeatures { lhs: usize, rhs: usize },
    Add { lhs: usize, rhs: usize },
    Sum { input: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
}

/// Computation tape: forward values plus the recorded operations needed to
/// replay the graph backwards.
#[derive(Default)]
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    requires: Vec<bool>,
    is_leaf: Vec<bool>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Registers a leaf node, copying the tensor's current values.
    pub fn leaf(&mut self, tensor: &Tensor) -> TensorId {
        self.push_leaf(tensor.shape.clone(), tensor.data.clone(), tensor.requires_grad)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorId {
        self.push_leaf(shape, data, requires_grad)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.shapes.push(shape);
        self.data.push(data);
        self.grads.push(Vec::new());
        self.requires.push(requires_grad);
        self.is_leaf.push(true);
        self.ops.push(Op::Leaf);
        TensorId(self.ops.len() - 1)
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.shapes.push(shape);
        self.data.push(data);
        self.grads.push(Vec::new());
        self.requires.push(requires);
        self.is_leaf.push(false);
        self.ops.push(op);
        TensorId(self.ops.len() - 1)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.data[id.0]
    }

    /// Value of a scalar node.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.data[id.0].len(), 1);
        self.data[id.0][0]
    }

    /// Accumulated gradient of a node, if any backward pass has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        let g = &self.grads[id.0];
        if g.is_empty() {
            None
        } else {
            Some(g.as_slice())
        }
    }

    /// Exports a node as a standalone tensor (values only).
    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.shapes[id.0].clone(),
            data: self.data[id.0].clone(),
            grad: None,
            requires_grad: false,
        }
    }

    fn dims4(&self, id: usize, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let s = &self.shapes[id];
        if s.len() != 4 {
            return Err(Error::shape(op, format!("expected a [B,C,H,W] tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// Depthwise 2-D convolution: one odd-sized `k×k` kernel per channel,
    /// stride 1, zero same-padding.
    pub fn depthwise_conv2d(&mut self, input: TensorId, kernels: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = self.dims4(input.0, "depthwise_conv2d")?;
        let ks = self.shapes[kernels.0].clone();
        if ks.len() != 3 || ks[1] != ks[2] {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernels must be [C,k,k], got {ks:?}"),
            ));
        }
        if ks[0] != c {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input has {c} channels but kernels cover {}", ks[0]),
            ));
        }
        let k = ks[1];
        if k.is_multiple_of(2) {
            return Err(Error::invalid("depthwise_conv2d", format!("kernel size {k} must be odd")));
        }
        let pad = k / 2;
        let x = &self.data[input.0];
        let ker = &self.data[kernels.0];
        let mut out = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                let x_plane = &x[(bi * c + ci) * h * w..][..h * w];
                let k_plane = &ker[ci * k * k..][..k * k];
                let o_plane = &mut out[(bi * c + ci) * h * w..][..h * w];
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for di in 0..k {
                            let ii = i + di;
                            if ii < pad || ii - pad >= h {
                                continue;
                            }
                            let row = &x_plane[(ii - pad) * w..][..w];
                            let krow = &k_plane[di * k..][..k];
                            for (dj, &kv) in krow.iter().enumerate() {
                                let jj = j + dj;
                                if jj < pad || jj - pad >= w {
                                    continue;
                                }
                                acc += row[jj - pad] * kv;
                            }
                        }
                        o_plane[i * w + j] = acc;
                    }
                }
            }
        }
        let requires = self.requires[input.0] || self.requires[kernels.0];
        Ok(self.push_node(
            vec![b, c, h, w],
            out,
            requires,
            Op::DepthwiseConv2d { input: input.0, kernels: kernels.0 },
        ))
    }

    /// 1×1 convolution mixing channels: `weights` is `[C_out, C]`, `bias` is `[C_out]`.
    pub fn pointwise_conv2d(&mut self, input: TensorId, weights: TensorId, bias: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = self.dims4(input.0, "pointwise_conv2d")?;
        let ws = &self.shapes[weights.0];
        if ws.len() != 2 || ws[1] != c {
            return Err(Error::shape(
                "pointwise_conv2d",
                format!("weights must be [C_out,{c}], got {ws:?}"),
            ));
        }
        let c_out = ws[0];
        if self.shapes[bias.0] != [c_out] {
            return Err(Error::shape(
                "pointwise_conv2d",
                format!("bias must be [{c_out}], got {:?}", self.shapes[bias.0]),
            ));
        }
        let hw = h * w;
        let x = &self.data[input.0];
        let wgt = &self.data[weights.0];
        let bs = &self.data[bias.0];
        let mut out = vec![0.0; b * c_out * hw];
        for bi in 0..b {
            for co in 0..c_out {
                let o_plane = &mut out[(bi * c_out + co) * hw..][..hw];
                o_plane.fill(bs[co]);
                for ci in 0..c {
                    let wv = wgt[co * c + ci];
                    let x_plane = &x[(bi * c + ci) * hw..][..hw];
                    for p in 0..hw {
                        o_plane[p] += wv * x_plane[p];
                    }
                }
            }
        }
        let requires =
            self.requires[input.0] || self.requires[weights.0] || self.requires[bias.0];
        Ok(self.push_node(
            vec![b, c_out, h, w],
            out,
            requires,
            Op::PointwiseConv2d { input: input.0, weights: weights.0, bias: bias.0 },
        ))
    }

    /// Depthwise-separable convolution: depthwise `k×k` filtering followed by a
    /// pointwise channel mix with bias. Stride 1, zero same-padding, so spatial
    /// dimensions are preserved.
    pub fn separable_conv2d(
        &mut self,
        input: TensorId,
        depthwise_kernels: TensorId,
        pointwise_kernels: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let mid = self.depthwise_conv2d(input, depthwise_kernels)?;
        self.pointwise_conv2d(mid, pointwise_kernels, bias)
    }

    /// Elementwise `max(0, x)`. The subgradient at 0 is taken as 0, and outputs
    /// are canonical `+0.0` wherever the input is non-positive.
    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let data: Vec<f64> = self.data[input.0]
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = self.shapes[input.0].clone();
        let requires = self.requires[input.0];
        self.push_node(shape, data, requires, Op::Relu { input: input.0 })
    }

    /// 2×2 max-pooling with stride 2. Ties resolve to the first maximum in
    /// row-major scan order, which is where the backward pass routes the
    /// entire upstream gradient.
    pub fn maxpool2d(&mut self, input: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = self.dims4(input.0, "maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "maxpool2d",
                format!("spatial dims must be even, got {h}×{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = &self.data[input.0];
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let obase = (bi * c + ci) * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best_idx = base + (2 * i) * w + 2 * j;
                        let mut best = x[best_idx];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * i + di) * w + 2 * j + dj;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                        out[obase + i * ow + j] = best;
                        argmax[obase + i * ow + j] = best_idx;
                    }
                }
            }
        }
        let requires = self.requires[input.0];
        Ok(self.push_node(
            vec![b, c, oh, ow],
            out,
            requires,
            Op::MaxPool2d { input: input.0, argmax },
        ))
    }

    /// Affine map per row: `out[b] = weights · input[b] + bias` with `weights`
    /// of shape `[F_out, F]`.
    pub fn dense(&mut self, input: TensorId, weights: TensorId, bias: TensorId) -> Result<TensorId> {
        let s = &self.shapes[input.0];
        if s.len() != 2 {
            return Err(Error::shape("dense", format!("expected [B,F] input, got {s:?}")));
        }
        let (b, f) = (s[0], s[1]);
        let ws = &self.shapes[weights.0];
        if ws.len() != 2 || ws[1] != f {
            return Err(Error::shape("dense", format!("weights must be [F_out,{f}], got {ws:?}")));
        }
        let f_out = ws[0];
        if self.shapes[bias.0] != [f_out] {
            return Err(Error::shape(
                "dense",
                format!("bias must be [{f_out}], got {:?}", self.shapes[bias.0]),
            ));
        }
        let x = &self.data[input.0];
        let wgt = &self.data[weights.0];
        let bs = &self.data[bias.0];
        let mut out = vec![0.0; b * f_out];
        for bi in 0..b {
            let row = &x[bi * f..][..f];
            for o in 0..f_out {
                let wrow = &wgt[o * f..][..f];
                let mut acc = bs[o];
                for i in 0..f {
                    acc += wrow[i] * row[i];
                }
                out[bi * f_out + o] = acc;
            }
        }
        let requires =
            self.requires[input.0] || self.requires[weights.0] || self.requires[bias.0];
        Ok(self.push_node(
            vec![b, f_out],
            out,
            requires,
            Op::Dense { input: input.0, weights: weights.0, bias: bias.0 },
        ))
    }

    /// Cross-stitch mix of two same-shaped activation maps. `alphas` is a
    /// `[4]` node holding `(a_rr, a_rd, a_dr, a_dd)`; the same four scalars
    /// apply at every position. Returns the two mixed maps `(x'_r, x'_d)`.
    pub fn stitch(
        &mut self,
        x_r: TensorId,
        x_d: TensorId,
        alphas: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        if self.shapes[x_r.0] != self.shapes[x_d.0] {
            return Err(Error::shape(
                "stitch",
                format!(
                    "branch activations differ: {:?} vs {:?}",
                    self.shapes[x_r.0], self.shapes[x_d.0]
                ),
            ));
        }
        if self.shapes[alphas.0] != [4] {
            return Err(Error::shape(
                "stitch",
                format!("alphas must be [4], got {:?}", self.shapes[alphas.0]),
            ));
        }
        let a = &self.data[alphas.0];
        let (a_rr, a_rd, a_dr, a_dd) = (a[0], a[1], a[2], a[3]);
        let xr = &self.data[x_r.0];
        let xd = &self.data[x_d.0];
        let out_r: Vec<f64> = xr.iter().zip(xd).map(|(&r, &d)| a_rr * r + a_rd * d).collect();
        let out_d: Vec<f64> = xr.iter().zip(xd).map(|(&r, &d)| a_dr * r + a_dd * d).collect();
        let shape = self.shapes[x_r.0].clone();
        let requires =
            self.requires[x_r.0] || self.requires[x_d.0] || self.requires[alphas.0];
        let id_r = self.push_node(
            shape.clone(),
            out_r,
            requires,
            Op::StitchR { x_r: x_r.0, x_d: x_d.0, alphas: alphas.0 },
        );
        let id_d = self.push_node(
            shape,
            out_d,
            requires,
            Op::StitchD { x_r: x_r.0, x_d: x_d.0, alphas: alphas.0 },
        );
        Ok((id_r, id_d))
    }

    /// Collapses all trailing dimensions: `[B, ...] → [B, rest]`.
    pub fn flatten(&mut self, input: TensorId) -> TensorId {
        let s = &self.shapes[input.0];
        let b = s[0];
        let rest: usize = s[1..].iter().product();
        let data = self.data[input.0].clone();
        let requires = self.requires[input.0];
        self.push_node(vec![b, rest], data, requires, Op::Flatten { input: input.0 })
    }

    /// Concatenates two `[B, F]` tensors along the feature dimension.
    pub fn concat_features(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (ls, rs) = (&self.shapes[lhs.0], &self.shapes[rhs.0]);
        if ls.len() != 2 || rs.len() != 2 || ls[0] != rs[0] {
            return Err(Error::shape(
                "concat_features",
                format!("expected [B,F1] and [B,F2] with equal B, got {ls:?} and {rs:?}"),
            ));
        }
        let (b, f1, f2) = (ls[0], ls[1], rs[1]);
        let mut out = Vec::with_capacity(b * (f1 + f2));
        for bi in 0..b {
            out.extend_from_slice(&self.data[lhs.0][bi * f1..][..f1]);
            out.extend_from_slice(&self.data[rhs.0][bi * f2..][..f2]);
        }
        let requires = self.requires[lhs.0] || self.requires[rhs.0];
        Ok(self.push_node(
            vec![b, f1 + f2],
            out,
            requires,
            Op::ConcatFeatures { lhs: lhs.0, rhs: rhs.0 },
        ))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        if self.shapes[lhs.0] != self.shapes[rhs.0] {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shapes[lhs.0], self.shapes[rhs.0]),
            ));
        }
        let data: Vec<f64> = self.data[lhs.0]
            .iter()
            .zip(&self.data[rhs.0])
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.shapes[lhs.0].clone();
        let requires = self.requires[lhs.0] || self.requires[rhs.0];
        Ok(self.push_node(shape, data, requires, Op::Add { lhs: lhs.0, rhs: rhs.0 }))
    }

    /// Sum of all elements, yielding a scalar node.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let total: f64 = self.data[input.0].iter().sum();
        let requires = self.requires[input.0];
        self.push_node(vec![1], vec![total], requires, Op::Sum { input: input.0 })
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, stabilized by
    /// max-subtraction. `logits` is `[B, K]`; every label must be `< K`.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let s = &self.shapes[logits.0];
        if s.len() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("expected [B,K] logits, got {s:?}"),
            ));
        }
        let (b, k) = (s[0], s[1]);
        if labels.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("batch {b} but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidLabel { label: bad });
        }
        let x = &self.data[logits.0];
        let mut total = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &x[bi * k..][..k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += -(row[label] - max - log_sum);
        }
        let loss = total / b as f64;
        let requires = self.requires[logits.0];
        Ok(self.push_node(
            vec![1],
            vec![loss],
            requires,
            Op::SoftmaxCrossEntropy { logits: logits.0, labels: labels.to_vec() },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse traversal from a scalar loss node. Every leaf with
    /// `requires_grad` receives its accumulated `∂loss/∂leaf`; calling again
    /// without resetting leaf gradients accumulates on top.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.data[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shapes[loss.0].clone() });
        }
        // Interior gradients are scratch: reset every call. Leaf gradients persist.
        for i in 0..self.ops.len() {
            if !self.requires[i] {
                continue;
            }
            let numel = self.data[i].len();
            if self.is_leaf[i] {
                if self.grads[i].is_empty() {
                    self.grads[i] = vec![0.0; numel];
                }
            } else {
                self.grads[i].clear();
                self.grads[i].resize(numel, 0.0);
            }
        }
        if !self.requires[loss.0] {
            // Constant loss: nothing depends on any tracked leaf.
            return Ok(());
        }
        if self.grads[loss.0].is_empty() {
            self.grads[loss.0] = vec![0.0; 1];
        }
        self.grads[loss.0][0] += 1.0;

        for i in (0..=loss.0).rev() {
            if !self.requires[i] || self.is_leaf[i] {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            if !g.is_empty() {
                self.backward_step(i, &g);
            }
            self.grads[i] = g;
        }
        Ok(())
    }

    fn accumulate(&mut self, node: usize, f: impl FnOnce(&mut [f64])) {
        if self.requires[node] {
            f(&mut self.grads[node]);
        }
    }

    fn backward_step(&mut self, node: usize, g: &[f64]) {
        let op = self.ops[node].clone();
        match op {
            Op::Leaf => {}

            Op::DepthwiseConv2d { input, kernels } => {
                let (b, c, h, w) = {
                    let s = &self.shapes[input];
                    (s[0], s[1], s[2], s[3])
                };
                let k = self.shapes[kernels][1];
                let pad = k / 2;
                if self.requires[input] {
                    let ker = &self.data[kernels];
                    let din = &mut self.grads[input];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            let k_plane = &ker[ci * k * k..][..k * k];
                            for i in 0..h {
                                for j in 0..w {
                                    let gv = g[base + i * w + j];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for di in 0..k {
                                        let ii = i + di;
                                        if ii < pad || ii - pad >= h {
                                            continue;
                                        }
                                        for dj in 0..k {
                                            let jj = j + dj;
                                            if jj < pad || jj - pad >= w {
                                                continue;
                                            }
                                            din[base + (ii - pad) * w + (jj - pad)] +=
                                                gv * k_plane[di * k + dj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.requires[kernels] {
                    // Accumulate per-channel kernel gradients across batch and space.
                    let x = std::mem::take(&mut self.data[input]);
                    let dker = &mut self.grads[kernels];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            for i in 0..h {
                                for j in 0..w {
                                    let gv = g[base + i * w + j];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for di in 0..k {
                                        let ii = i + di;
                                        if ii < pad || ii - pad >= h {
                                            continue;
                                        }
                                        for dj in 0..k {
                                            let jj = j + dj;
                                            if jj < pad || jj - pad >= w {
                                                continue;
                                            }
                                            dker[ci * k * k + di * k + dj] +=
                                                gv * x[base + (ii - pad) * w + (jj - pad)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.data[input] = x;
                }
            }

            Op::PointwiseConv2d { input, weights, bias } => {
                let (b, c, h, w) = {
                    let s = &self.shapes[input];
                    (s[0], s[1], s[2], s[3])
                };
                let c_out = self.shapes[weights][0];
                let hw = h * w;
                if self.requires[input] {
                    let wgt = &self.data[weights];
                    let din = &mut self.grads[input];
                    for bi in 0..b {
                        for ci in 0..c {
                            let d_plane = &mut din[(bi * c + ci) * hw..][..hw];
                            for co in 0..c_out {
                                let wv = wgt[co * c + ci];
                                let g_plane = &g[(bi * c_out + co) * hw..][..hw];
                                for p in 0..hw {
                                    d_plane[p] += wv * g_plane[p];
                                }
                            }
                        }
                    }
                }
                if self.requires[weights] {
                    let x = std::mem::take(&mut self.data[input]);
                    let dw = &mut self.grads[weights];
                    for co in 0..c_out {
                        for ci in 0..c {
                            let mut acc = 0.0;
                            for bi in 0..b {
                                let g_plane = &g[(bi * c_out + co) * hw..][..hw];
                                let x_plane = &x[(bi * c + ci) * hw..][..hw];
                                for p in 0..hw {
                                    acc += g_plane[p] * x_plane[p];
                                }
                            }
                            dw[co * c + ci] += acc;
                        }
                    }
                    self.data[input] = x;
                }
                if self.requires[bias] {
                    let db = &mut self.grads[bias];
                    for co in 0..c_out {
                        let mut acc = 0.0;
                        for bi in 0..b {
                            let g_plane = &g[(bi * c_out + co) * hw..][..hw];
                            acc += g_plane.iter().sum::<f64>();
                        }
                        db[co] += acc;
                    }
                }
            }

            Op::Relu { input } => {
                if self.requires[input] {
                    let x = std::mem::take(&mut self.data[input]);
                    {
                        let din = &mut self.grads[input];
                        for (i, &xv) in x.iter().enumerate() {
                            if xv > 0.0 {
                                din[i] += g[i];
                            }
                        }
                    }
                    self.data[input] = x;
                }
            }

            Op::MaxPool2d { input, argmax } => {
                if self.requires[input] {
                    let din = &mut self.grads[input];
                    for (o, &src) in argmax.iter().enumerate() {
                        din[src] += g[o];
                    }
                }
            }

            Op::Dense { input, weights, bias } => {
                let (b, f) = {
                    let s = &self.shapes[input];
                    (s[0], s[1])
                };
                let f_out = self.shapes[weights][0];
                if self.requires[input] {
                    let wgt = &self.data[weights];
                    let din = &mut self.grads[input];
                    for bi in 0..b {
                        let d_row = &mut din[bi * f..][..f];
                        for o in 0..f_out {
                            let gv = g[bi * f_out + o];
                            if gv == 0.0 {
                                continue;
                            }
                            let w_row = &wgt[o * f..][..f];
                            for i in 0..f {
                                d_row[i] += gv * w_row[i];
                            }
                        }
                    }
                }
                if self.requires[weights] {
                    let x = std::mem::take(&mut self.data[input]);
                    let dw = &mut self.grads[weights];
                    for o in 0..f_out {
                        let dw_row = &mut dw[o * f..][..f];
                        for bi in 0..b {
                            let gv = g[bi * f_out + o];
                            if gv == 0.0 {
                                continue;
                            }
                            let x_row = &x[bi * f..][..f];
                            for i in 0..f {
                                dw_row[i] += gv * x_row[i];
                            }
                        }
                    }
                    self.data[input] = x;
                }
                if self.requires[bias] {
                    let db = &mut self.grads[bias];
                    for o in 0..f_out {
                        let mut acc = 0.0;
                        for bi in 0..b {
                            acc += g[bi * f_out + o];
                        }
                        db[o] += acc;
                    }
                }
            }

            Op::StitchR { x_r, x_d, alphas } => {
                let (a_rr, a_rd) = (self.data[alphas][0], self.data[alphas][1]);
                self.accumulate(x_r, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += a_rr * gv;
                    }
                });
                self.accumulate(x_d, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += a_rd * gv;
                    }
                });
                if self.requires[alphas] {
                    let xr = std::mem::take(&mut self.data[x_r]);
                    let xd = std::mem::take(&mut self.data[x_d]);
                    let (mut d_rr, mut d_rd) = (0.0, 0.0);
                    for (i, gv) in g.iter().enumerate() {
                        d_rr += gv * xr[i];
                        d_rd += gv * xd[i];
                    }
                    self.grads[alphas][0] += d_rr;
                    self.grads[alphas][1] += d_rd;
                    self.data[x_r] = xr;
                    self.data[x_d] = xd;
                }
            }

            Op::StitchD { x_r, x_d, alphas } => {
                let (a_dr, a_dd) = (self.data[alphas][2], self.data[alphas][3]);
                self.accumulate(x_r, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += a_dr * gv;
                    }
                });
                self.accumulate(x_d, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += a_dd * gv;
                    }
                });
                if self.requires[alphas] {
                    let xr = std::mem::take(&mut self.data[x_r]);
                    let xd = std::mem::take(&mut self.data[x_d]);
                    let (mut d_dr, mut d_dd) = (0.0, 0.0);
                    for (i, gv) in g.iter().enumerate() {
                        d_dr += gv * xr[i];
                        d_dd += gv * xd[i];
                    }
                    self.grads[alphas][2] += d_dr;
                    self.grads[alphas][3] += d_dd;
                    self.data[x_r] = xr;
                    self.data[x_d] = xd;
                }
            }

            Op::Flatten { input } => {
                self.accumulate(input, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += gv;
                    }
                });
            }

            Op::ConcatFeatures { lhs, rhs } => {
                let (b, f1) = {
                    let s = &self.shapes[lhs];
                    (s[0], s[1])
                };
                let f2 = self.shapes[rhs][1];
                self.accumulate(lhs, |d| {
                    for bi in 0..b {
                        for i in 0..f1 {
                            d[bi * f1 + i] += g[bi * (f1 + f2) + i];
                        }
                    }
                });
                self.accumulate(rhs, |d| {
                    for bi in 0..b {
                        for i in 0..f2 {
                            d[bi * f2 + i] += g[bi * (f1 + f2) + f1 + i];
                        }
                    }
                });
            }

            Op::Add { lhs, rhs } => {
                self.accumulate(lhs, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += gv;
                    }
                });
                self.accumulate(rhs, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += gv;
                    }
                });
            }

            Op::Sum { input } => {
                let gv = g[0];
                self.accumulate(input, |d| {
                    for v in d.iter_mut() {
                        *v += gv;
                    }
                });
            }

            Op::SoftmaxCrossEntropy { logits, labels } => {
                if self.requires[logits] {
                    let k = self.shapes[logits][1];
                    let b = labels.len();
                    let gv = g[0];
                    let x = std::mem::take(&mut self.data[logits]);
                    {
                        let din = &mut self.grads[logits];
                        for (bi, &label) in labels.iter().enumerate() {
                            let row = &x[bi * k..][..k];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                            for c in 0..k {
                                let p = (row[c] - max).exp() / sum;
                                let t = if c == label { 1.0 } else { 0.0 };
                                din[bi * k + c] += gv * (p - t) / b as f64;
                            }
                        }
                    }
                    self.data[logits] = x;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{block_relative_error, finite_difference_grad, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn separable_conv_identity_kernel_passes_input_through() {
        // Centered delta depthwise kernel + identity pointwise + zero bias.
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 2, 4, 4], (0..32).map(|v| v as f64 * 0.25 - 3.0).collect()).unwrap();
        let mut dw = Tensor::zeros(vec![2, 3, 3]);
        dw.data[4] = 1.0;
        dw.data[9 + 4] = 1.0;
        let pw = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bias = Tensor::zeros(vec![2]);
        let xi = tape.leaf(&x);
        let (di, pi, bi) = (tape.leaf(&dw), tape.leaf(&pw), tape.leaf(&bias));
        let out = tape.separable_conv2d(xi, di, pi, bi).unwrap();
        assert_eq!(tape.data(out), x.data.as_slice());
    }

    #[test]
    fn separable_conv_zero_kernels_output_bias() {
        let mut tape = Tape::new();
        let x = Tensor::filled(vec![1, 3, 4, 4], 2.5);
        let dw = Tensor::zeros(vec![3, 3, 3]);
        let pw = Tensor::zeros(vec![5, 3]);
        let bias = Tensor::new(vec![5], vec![1.0, -2.0, 0.5, 0.0, 3.0]).unwrap();
        let xi = tape.leaf(&x);
        let (di, pi, bi) = (tape.leaf(&dw), tape.leaf(&pw), tape.leaf(&bias));
        let out = tape.separable_conv2d(xi, di, pi, bi).unwrap();
        for c in 0..5 {
            for p in 0..16 {
                assert_eq!(tape.data(out)[c * 16 + p], bias.data[c]);
            }
        }
    }

    #[test]
    fn separable_conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(vec![1, 3, 4, 4]);
        let dw = Tensor::zeros(vec![2, 3, 3]);
        let pw = Tensor::zeros(vec![4, 2]);
        let bias = Tensor::zeros(vec![4]);
        let xi = tape.leaf(&x);
        let (di, pi, bi) = (tape.leaf(&dw), tape.leaf(&pw), tape.leaf(&bias));
        let err = tape.separable_conv2d(xi, di, pi, bi).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn separable_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = randn(&mut rng, vec![1, 1, 4, 4]);
        let dw = randn(&mut rng, vec![1, 3, 3]);
        let pw = randn(&mut rng, vec![2, 1]);
        let bias = randn(&mut rng, vec![2]);

        let run = |x: &Tensor, dw: &Tensor, pw: &Tensor, bias: &Tensor| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let xi = tape.leaf_from(x.shape.clone(), x.data.clone(), true);
            let di = tape.leaf_from(dw.shape.clone(), dw.data.clone(), true);
            let pi = tape.leaf_from(pw.shape.clone(), pw.data.clone(), true);
            let bi = tape.leaf_from(bias.shape.clone(), bias.data.clone(), true);
            let out = tape.separable_conv2d(xi, di, pi, bi).unwrap();
            let loss = tape.sum(out);
            tape.backward(loss).unwrap();
            (
                tape.value(loss),
                [xi, di, pi, bi].iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect(),
            )
        };
        let (_, analytic) = run(&x, &dw, &pw, &bias);

        let tensors = [&x, &dw, &pw, &bias];
        for (slot, t) in tensors.iter().enumerate() {
            let fd = finite_difference_grad(
                |probe| {
                    let mut args: Vec<Tensor> = tensors.iter().map(|t| (*t).clone()).collect();
                    args[slot] = probe.clone();
                    run(&args[0], &args[1], &args[2], &args[3]).0
                },
                t,
                1e-6,
            );
            let rel = block_relative_error(&analytic[slot], &fd.data);
            assert!(rel <= 1e-6, "slot {slot}: rel err {rel}");
        }
    }

    #[test]
    fn maxpool_basic_and_constant() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let xi = tape.leaf(&x);
        let out = tape.maxpool2d(xi).unwrap();
        assert_eq!(tape.data(out), &[4.0]);

        let c = Tensor::filled(vec![1, 1, 4, 4], 7.25);
        let ci = tape.leaf(&c);
        let out = tape.maxpool2d(ci).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 7.25));
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(vec![1, 1, 3, 4]);
        let xi = tape.leaf(&x);
        assert!(tape.maxpool2d(xi).is_err());
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_in_scan_order() {
        // Window [[5,5],[1,2]]: the tie resolves to index (0,0).
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 1.0, 2.0]).unwrap();
        let xi = tape.leaf_from(x.shape.clone(), x.data.clone(), true);
        let out = tape.maxpool2d(xi).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xi).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_forward_cases() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let xi = tape.leaf(&x);
        let out = tape.relu(xi);
        assert_eq!(tape.data(out), &[0.0, 0.0, 2.0]);

        let neg = Tensor::new(vec![4], vec![-3.0, -0.5, -1e9, -1e-9]).unwrap();
        let ni = tape.leaf(&neg);
        let out = tape.relu(ni);
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_matches_fd_away_from_kink() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        // Keep samples at least 0.1 away from the kink at 0.
        let data: Vec<f64> = (0..16)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..2.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::new(vec![16], data).unwrap();
        let run = |t: &Tensor| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let xi = tape.leaf_from(t.shape.clone(), t.data.clone(), true);
            let r = tape.relu(xi);
            let loss = tape.sum(r);
            tape.backward(loss).unwrap();
            (tape.value(loss), tape.grad(xi).unwrap().to_vec())
        };
        let (_, analytic) = run(&x);
        let fd = finite_difference_grad(|t| run(t).0, &x, 1e-6);
        let rel = block_relative_error(&analytic, &fd.data);
        assert!(rel <= 1e-6, "rel err {rel}");
    }

    #[test]
    fn dense_identity_and_bias_cases() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let zero_b = Tensor::zeros(vec![3]);
        let xi = tape.leaf(&x);
        let (wi, bi) = (tape.leaf(&eye), tape.leaf(&zero_b));
        let out = tape.dense(xi, wi, bi).unwrap();
        assert_eq!(tape.data(out), x.data.as_slice());

        let zero_w = Tensor::zeros(vec![2, 3]);
        let b = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let (wi, bi) = (tape.leaf(&zero_w), tape.leaf(&b));
        let out = tape.dense(xi, wi, bi).unwrap();
        assert_eq!(tape.data(out), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = randn(&mut rng, vec![2, 3]);
        let w = randn(&mut rng, vec![4, 3]);
        let b = randn(&mut rng, vec![4]);
        let run = |x: &Tensor, w: &Tensor, b: &Tensor| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let xi = tape.leaf_from(x.shape.clone(), x.data.clone(), true);
            let wi = tape.leaf_from(w.shape.clone(), w.data.clone(), true);
            let bi = tape.leaf_from(b.shape.clone(), b.data.clone(), true);
            let out = tape.dense(xi, wi, bi).unwrap();
            let loss = tape.sum(out);
            tape.backward(loss).unwrap();
            (
                tape.value(loss),
                [xi, wi, bi].iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect(),
            )
        };
        let (_, analytic) = run(&x, &w, &b);
        let tensors = [&x, &w, &b];
        for (slot, t) in tensors.iter().enumerate() {
            let fd = finite_difference_grad(
                |probe| {
                    let mut args: Vec<Tensor> = tensors.iter().map(|t| (*t).clone()).collect();
                    args[slot] = probe.clone();
                    run(&args[0], &args[1], &args[2]).0
                },
                t,
                1e-6,
            );
            let rel = block_relative_error(&analytic[slot], &fd.data);
            assert!(rel <= 1e-6, "slot {slot}: rel err {rel}");
        }
    }

    #[test]
    fn cross_entropy_symmetric_and_saturated() {
        let mut tape = Tape::new();
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let li = tape.leaf(&logits);
        let loss = tape.softmax_cross_entropy(li, &[0]).unwrap();
        assert!((tape.value(loss) - std::f64::consts::LN_2).abs() < 1e-12);

        let logits = Tensor::new(vec![1, 2], vec![30.0, -30.0]).unwrap();
        let li = tape.leaf(&logits);
        let loss = tape.softmax_cross_entropy(li, &[0]).unwrap();
        assert!(tape.value(loss) <= 1e-12, "got {}", tape.value(loss));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = Tensor::zeros(vec![2, 2]);
        let li = tape.leaf(&logits);
        let err = tape.softmax_cross_entropy(li, &[0, 2]).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { label: 2 }));
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let logits = randn(&mut rng, vec![4, 2]);
        let labels = [0usize, 1, 1, 0];
        let run = |t: &Tensor| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let li = tape.leaf_from(t.shape.clone(), t.data.clone(), true);
            let loss = tape.softmax_cross_entropy(li, &labels).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(loss), tape.grad(li).unwrap().to_vec())
        };
        let (_, analytic) = run(&logits);
        let fd = finite_difference_grad(|t| run(t).0, &logits, 1e-6);
        let rel = block_relative_error(&analytic, &fd.data);
        assert!(rel <= 1e-6, "rel err {rel}");
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.0, 5.0, -6.0]).unwrap();
        let xi = tape.leaf_from(x.shape.clone(), x.data.clone(), true);
        let loss = tape.sum(xi);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xi).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_constant_leaves_grads_zero() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let xi = tape.leaf_from(x.shape.clone(), x.data.clone(), true);
        let c = tape.leaf_from(vec![1], vec![42.0], false);
        tape.backward(c).unwrap();
        // x was never touched by the loss, so its grad stays unallocated or zero.
        assert!(tape.grad(xi).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(vec![2, 2]);
        let xi = tape.leaf(&x);
        let err = tape.backward(xi).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn repeated_backward_accumulates_leaf_grads() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap();
        let xi = tape.leaf_from(x.shape.clone(), x.data.clone(), true);
        let loss = tape.sum(xi);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xi).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn gradient_accumulation_is_linear() {
        // backward(L1 + L2) == backward(L1) then backward(L2), elementwise.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = randn(&mut rng, vec![1, 2, 4, 4]);
        let dw = randn(&mut rng, vec![2, 3, 3]);

        let build = |tape: &mut Tape| -> (TensorId, TensorId, TensorId, TensorId) {
            let xi = tape.leaf_from(x.shape.clone(), x.data.clone(), true);
            let di = tape.leaf_from(dw.shape.clone(), dw.data.clone(), true);
            let conv = tape.depthwise_conv2d(xi, di).unwrap();
            let l1 = tape.sum(conv);
            let r = tape.relu(conv);
            let l2 = tape.sum(r);
            (xi, di, l1, l2)
        };

        let mut t1 = Tape::new();
        let (x1, d1, l1, l2) = build(&mut t1);
        let joint = t1.add(l1, l2).unwrap();
        t1.backward(joint).unwrap();

        let mut t2 = Tape::new();
        let (x2, d2, m1, m2) = build(&mut t2);
        t2.backward(m1).unwrap();
        t2.backward(m2).unwrap();

        for (a, b) in [(x1, x2), (d1, d2)] {
            let ga = t1.grad(a).unwrap();
            let gb = t2.grad(b).unwrap();
            for (u, v) in ga.iter().zip(gb) {
                assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let x = randn(&mut rng, vec![2, 3, 8, 8]);
        let dw = randn(&mut rng, vec![3, 3, 3]);
        let pw = randn(&mut rng, vec![4, 3]);
        let b = randn(&mut rng, vec![4]);
        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let xi = tape.leaf(&x);
            let (di, pi, bi) = (tape.leaf(&dw), tape.leaf(&pw), tape.leaf(&b));
            let conv = tape.separable_conv2d(xi, di, pi, bi).unwrap();
            let r = tape.relu(conv);
            let p = tape.maxpool2d(r).unwrap();
            tape.data(p).to_vec()
        };
        let a = run();
        let b2 = run();
        assert!(a.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
