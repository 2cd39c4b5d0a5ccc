//! Wengert tape: reverse-mode AD via operation recording.
//!
//! Operations execute eagerly (define-by-run) and record one node each.
//! `backward` replays the node list in reverse, accumulating gradients
//! per node. Binary elementwise ops accept equal shapes or one scalar
//! operand; no other broadcasting exists.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Result, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardMode {
    /// Exact reverse-mode gradients.
    Standard,
    /// Guided backpropagation: at every ReLU node, gradient entries that
    /// are negative are zeroed in addition to the forward-sign mask.
    Guided,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Relu,
    Sigmoid,
    Sqrt,
    Softmax,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f32),
    Sum,
    Mean,
    /// Mean over the spatial dims of a `[C, D, H, W]` tensor, one value
    /// per channel.
    SpatialMean,
    Reshape,
    Concat,
    Dense,
    Conv3d {
        stride: usize,
        padding: usize,
    },
    MaxPool3d {
        argmax: Vec<u32>,
    },
    AvgPool3d {
        size: usize,
    },
    UpsampleNearest3d {
        factor: usize,
    },
    /// Scalar pick `x[index]` from a rank-1 tensor.
    Gather {
        index: usize,
    },
    /// One output per index subset: sums of the (flattened) input over
    /// each subset.
    SubsetSums(Arc<Vec<Vec<u32>>>),
    /// y = 1 / max(x, eps), elementwise. Gradient is zero where clamped.
    RecipClamp {
        eps: f32,
    },
    /// Scalar loss `logsumexp(x) - x[target]` over rank-1 logits.
    CrossEntropyLogits {
        target: usize,
    },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Recording tape. Build one per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    names: BTreeMap<String, NodeId>,
    mode: BackwardMode,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_mode(BackwardMode::Standard)
    }

    pub fn with_mode(mode: BackwardMode) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            names: BTreeMap::new(),
            mode,
            ran_backward: false,
        }
    }

    pub fn mode(&self) -> BackwardMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient accumulated at `id` by the last `backward`, if any path
    /// reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Registers a capture point for [`Tape::capture`].
    pub fn name_layer(&mut self, name: &str, id: NodeId) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(TensorError::InvalidArg(format!(
                "layer name `{name}` already taken"
            )));
        }
        self.names.insert(name.to_string(), id);
        Ok(())
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(|s| s.as_str())
    }

    pub fn layer_id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Forward activation and accumulated gradient at a named layer.
    pub fn capture(&self, name: &str) -> Result<(&Tensor, &Tensor)> {
        let id = *self
            .names
            .get(name)
            .ok_or_else(|| TensorError::UnknownLayer(name.to_string()))?;
        if !self.ran_backward {
            return Err(TensorError::NoBackward);
        }
        let grad = self.grads[id]
            .as_ref()
            .ok_or_else(|| TensorError::InvalidArg(format!("no gradient reached layer `{name}`")))?;
        Ok((&self.nodes[id].value, grad))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn scalar(&mut self, v: f32) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    // ── Unary elementwise ────────────────────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = Tensor {
            shape: self.nodes[x].value.shape().to_vec(),
            data: self.nodes[x].value.data().iter().map(|v| v.max(0.0)).collect(),
        };
        self.push(Op::Relu, vec![x], value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = Tensor {
            shape: self.nodes[x].value.shape().to_vec(),
            data: self.nodes[x]
                .value
                .data()
                .iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
        };
        self.push(Op::Sigmoid, vec![x], value)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let value = Tensor {
            shape: self.nodes[x].value.shape().to_vec(),
            data: self.nodes[x].value.data().iter().map(|v| v.sqrt()).collect(),
        };
        self.push(Op::Sqrt, vec![x], value)
    }

    pub fn recip_clamp(&mut self, x: NodeId, eps: f32) -> NodeId {
        let value = Tensor {
            shape: self.nodes[x].value.shape().to_vec(),
            data: self.nodes[x]
                .value
                .data()
                .iter()
                .map(|v| 1.0 / v.max(eps))
                .collect(),
        };
        self.push(Op::RecipClamp { eps }, vec![x], value)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let value = Tensor {
            shape: self.nodes[x].value.shape().to_vec(),
            data: self.nodes[x].value.data().iter().map(|v| c * v).collect(),
        };
        self.push(Op::Scale(c), vec![x], value)
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.shape().len() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "softmax expects rank-1 input, got {:?}",
                xv.shape()
            )));
        }
        let max = xv.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = xv.data().iter().map(|v| (v - max).exp()).collect();
        let denom: f32 = exps.iter().sum();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: exps.iter().map(|e| e / denom).collect(),
        };
        Ok(self.push(Op::Softmax, vec![x], value))
    }

    // ── Binary elementwise (equal shapes or one scalar operand) ──────

    fn binary_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa == sb {
            return Ok(sa.to_vec());
        }
        if self.nodes[b].value.is_scalar() {
            return Ok(sa.to_vec());
        }
        if self.nodes[a].value.is_scalar() {
            return Ok(sb.to_vec());
        }
        Err(TensorError::ShapeMismatch(format!(
            "{what}: {sa:?} vs {sb:?}"
        )))
    }

    fn binary(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
        what: &str,
    ) -> Result<NodeId> {
        let shape = self.binary_shape(a, b, what)?;
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if av.numel() == n && bv.numel() == n {
            for i in 0..n {
                data.push(f(av.data()[i], bv.data()[i]));
            }
        } else if bv.is_scalar() {
            let s = bv.data()[0];
            for i in 0..n {
                data.push(f(av.data()[i], s));
            }
        } else {
            let s = av.data()[0];
            for i in 0..n {
                data.push(f(s, bv.data()[i]));
            }
        }
        Ok(self.push(op, vec![a, b], Tensor { shape, data }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b, |x, y| x / y, "div")
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().map(|v| *v as f64).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s as f32))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.numel();
        let s: f64 = self.nodes[x].value.data().iter().map(|v| *v as f64).sum();
        self.push(Op::Mean, vec![x], Tensor::scalar((s / n as f64) as f32))
    }

    /// `[C, D, H, W] -> [C]`: per-channel mean over spatial positions.
    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x].value.shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "spatial_mean expects rank-4 input, got {shape:?}"
            )));
        }
        let (c, spatial) = (shape[0], shape[1] * shape[2] * shape[3]);
        let data = self.nodes[x].value.data();
        let out: Vec<f32> = (0..c)
            .map(|ch| {
                let s: f64 = data[ch * spatial..(ch + 1) * spatial]
                    .iter()
                    .map(|v| *v as f64)
                    .sum();
                (s / spatial as f64) as f32
            })
            .collect();
        Ok(self.push(Op::SpatialMean, vec![x], Tensor::from_vec(out)))
    }

    // ── Structure ────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x].value.reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Concatenation along axis 0; trailing dims must agree.
    pub fn concat(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(TensorError::InvalidArg("concat of zero tensors".into()));
        }
        let first = self.nodes[ids[0]].value.shape().to_vec();
        let mut axis0 = 0usize;
        for &id in ids {
            let s = self.nodes[id].value.shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat: {s:?} vs {first:?}"
                )));
            }
            axis0 += s[0];
        }
        let mut shape = first.clone();
        shape[0] = axis0;
        let mut data = Vec::with_capacity(shape.iter().product());
        for &id in ids {
            data.extend_from_slice(self.nodes[id].value.data());
        }
        Ok(self.push(Op::Concat, ids.to_vec(), Tensor { shape, data }))
    }

    // ── Layers ───────────────────────────────────────────────────────

    /// `y = W x + b` with `x: [n]`, `W: [m, n]`, `b: [m]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.nodes[x].value.shape(),
            self.nodes[w].value.shape(),
            self.nodes[b].value.shape(),
        );
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "dense: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (m, n) = (ws[0], ws[1]);
        let (xv, wv, bv) = (
            self.nodes[x].value.data(),
            self.nodes[w].value.data(),
            self.nodes[b].value.data(),
        );
        let mut out = Vec::with_capacity(m);
        for row in 0..m {
            let mut acc = bv[row] as f64;
            let wrow = &wv[row * n..(row + 1) * n];
            for i in 0..n {
                acc += wrow[i] as f64 * xv[i] as f64;
            }
            out.push(acc as f32);
        }
        Ok(self.push(Op::Dense, vec![x, w, b], Tensor::from_vec(out)))
    }

    /// 3-D convolution, zero padding, cubic stride.
    ///
    /// `x: [Cin, D, H, W]`, `w: [Cout, Cin, kd, kh, kw]`, `b: [Cout]`.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.nodes[x].value.shape().to_vec(),
            self.nodes[w].value.shape().to_vec(),
            self.nodes[b].value.shape().to_vec(),
        );
        if xs.len() != 4 || ws.len() != 5 || bs.len() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv3d: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        if ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv3d channels: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArg("conv3d stride must be >= 1".into()));
        }
        let (cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let odim = |i: usize, k: usize| -> Result<usize> {
            let padded = i + 2 * padding;
            if padded < k {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv3d kernel {k} exceeds padded extent {padded}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let (od, oh, ow) = (odim(d, kd)?, odim(h, kh)?, odim(wd, kw)?);
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[w].value.data();
        let bv = self.nodes[b].value.data();
        let mut out = vec![0.0f32; cout * od * oh * ow];
        for oc in 0..cout {
            let obase = oc * od * oh * ow;
            out[obase..obase + od * oh * ow].fill(bv[oc]);
            for ic in 0..cin {
                let xbase = ic * d * h * wd;
                for zk in 0..kd {
                    for yk in 0..kh {
                        for xk in 0..kw {
                            let wgt =
                                wv[(((oc * cin + ic) * kd + zk) * kh + yk) * kw + xk];
                            if wgt == 0.0 {
                                continue;
                            }
                            for oz in 0..od {
                                let iz = oz * stride + zk;
                                if iz < padding || iz - padding >= d {
                                    continue;
                                }
                                let iz = iz - padding;
                                for oy in 0..oh {
                                    let iy = oy * stride + yk;
                                    if iy < padding || iy - padding >= h {
                                        continue;
                                    }
                                    let iy = iy - padding;
                                    let orow = obase + (oz * oh + oy) * ow;
                                    let xrow = xbase + (iz * h + iy) * wd;
                                    for ox in 0..ow {
                                        let ix = ox * stride + xk;
                                        if ix < padding || ix - padding >= wd {
                                            continue;
                                        }
                                        out[orow + ox] += wgt * xv[xrow + ix - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![cout, od, oh, ow],
            data: out,
        };
        Ok(self.push(Op::Conv3d { stride, padding }, vec![x, w, b], value))
    }

    fn pool_dims(&self, x: NodeId, size: usize, what: &str) -> Result<[usize; 4]> {
        let xs = self.nodes[x].value.shape();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "{what} expects rank-4 input, got {xs:?}"
            )));
        }
        if size == 0 || xs[1] % size != 0 || xs[2] % size != 0 || xs[3] % size != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "{what}: spatial dims {:?} not divisible by window {size}",
                &xs[1..]
            )));
        }
        Ok([xs[0], xs[1], xs[2], xs[3]])
    }

    /// Non-overlapping max pooling with cubic window `size`.
    pub fn max_pool3d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let [c, d, h, w] = self.pool_dims(x, size, "max_pool3d")?;
        let (od, oh, ow) = (d / size, h / size, w / size);
        let xv = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(c * od * oh * ow);
        let mut argmax = Vec::with_capacity(c * od * oh * ow);
        for ch in 0..c {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for dz in 0..size {
                            for dy in 0..size {
                                for dx in 0..size {
                                    let idx = ((ch * d + oz * size + dz) * h + oy * size + dy) * w
                                        + ox * size
                                        + dx;
                                    if xv[idx] > best {
                                        best = xv[idx];
                                        best_idx = idx as u32;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![c, od, oh, ow],
            data: out,
        };
        Ok(self.push(Op::MaxPool3d { argmax }, vec![x], value))
    }

    /// Non-overlapping average pooling with cubic window `size`.
    pub fn avg_pool3d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let [c, d, h, w] = self.pool_dims(x, size, "avg_pool3d")?;
        let (od, oh, ow) = (d / size, h / size, w / size);
        let norm = 1.0 / (size * size * size) as f32;
        let xv = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(c * od * oh * ow);
        for ch in 0..c {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for dz in 0..size {
                            for dy in 0..size {
                                for dx in 0..size {
                                    acc += xv[((ch * d + oz * size + dz) * h + oy * size + dy) * w
                                        + ox * size
                                        + dx];
                                }
                            }
                        }
                        out.push(acc * norm);
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![c, od, oh, ow],
            data: out,
        };
        Ok(self.push(Op::AvgPool3d { size }, vec![x], value))
    }

    /// Nearest-neighbour upsampling by an integer factor on all spatial
    /// axes of a `[C, D, H, W]` tensor.
    pub fn upsample_nearest3d(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "upsample_nearest3d expects rank-4 input, got {xs:?}"
            )));
        }
        if factor == 0 {
            return Err(TensorError::InvalidArg("upsample factor must be >= 1".into()));
        }
        let (c, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let xv = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(c * od * oh * ow);
        for ch in 0..c {
            for oz in 0..od {
                for oy in 0..oh {
                    let row_base = ((ch * d + oz / factor) * h + oy / factor) * w;
                    for ox in 0..ow {
                        out.push(xv[row_base + ox / factor]);
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![c, od, oh, ow],
            data: out,
        };
        Ok(self.push(Op::UpsampleNearest3d { factor }, vec![x], value))
    }

    /// Picks one entry of a rank-1 tensor as a scalar node.
    pub fn gather_scalar(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.shape().len() != 1 || index >= xv.numel() {
            return Err(TensorError::InvalidArg(format!(
                "gather_scalar: index {index} into shape {:?}",
                xv.shape()
            )));
        }
        let v = xv.data()[index];
        Ok(self.push(Op::Gather { index }, vec![x], Tensor::scalar(v)))
    }

    /// Per-subset sums of the flattened input: output `[n_subsets]`.
    pub fn subset_sums(&mut self, x: NodeId, subsets: Arc<Vec<Vec<u32>>>) -> Result<NodeId> {
        let xv = self.nodes[x].value.data();
        let n = xv.len() as u32;
        let mut out = Vec::with_capacity(subsets.len());
        for s in subsets.iter() {
            let mut acc = 0.0f64;
            for &i in s {
                if i >= n {
                    return Err(TensorError::InvalidArg(format!(
                        "subset index {i} out of range for {n} elements"
                    )));
                }
                acc += xv[i as usize] as f64;
            }
            out.push(acc as f32);
        }
        Ok(self.push(Op::SubsetSums(subsets), vec![x], Tensor::from_vec(out)))
    }

    /// Sparse categorical cross-entropy over rank-1 logits.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let xv = &self.nodes[logits].value;
        if xv.shape().len() != 1 || target >= xv.numel() {
            return Err(TensorError::InvalidArg(format!(
                "cross_entropy_logits: logits {:?}, target {target}",
                xv.shape()
            )));
        }
        let max = xv.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = max
            + xv.data()
                .iter()
                .map(|v| ((v - max) as f64).exp())
                .sum::<f64>()
                .ln() as f32;
        let loss = lse - xv.data()[target];
        Ok(self.push(
            Op::CrossEntropyLogits { target },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from `output`, seeding with `seed` (shape must match
    /// the output value). Gradients accumulate per node and stay on the
    /// tape for `grad`/`capture`.
    pub fn backward(&mut self, output: NodeId, seed: Tensor) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if seed.shape() != self.nodes[output].value.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "seed gradient {:?} vs output {:?}",
                seed.shape(),
                self.nodes[output].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output] = Some(seed);
        for id in (0..=output).rev() {
            let Some(grad) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &grad)?;
            self.grads[id] = Some(grad);
        }
        self.ran_backward = true;
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f32]) {
        let slot = &mut self.grads[id];
        match slot {
            Some(g) => {
                let gd = g.data_mut();
                for (a, b) in gd.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                let shape = self.nodes[id].value.shape().to_vec();
                *slot = Some(Tensor {
                    shape,
                    data: delta.to_vec(),
                });
            }
        }
    }

    /// Adds `delta` into the gradient of `id`, reducing to a scalar when
    /// the operand is a broadcast scalar.
    fn accumulate_maybe_scalar(&mut self, id: NodeId, delta: Vec<f32>) {
        if self.nodes[id].value.is_scalar() && delta.len() != 1 {
            let s: f64 = delta.iter().map(|v| *v as f64).sum();
            self.accumulate(id, &[s as f32]);
        } else {
            self.accumulate(id, &delta);
        }
    }

    fn propagate(&mut self, id: NodeId, grad: &Tensor) -> Result<()> {
        let inputs = self.nodes[id].inputs.clone();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Relu => {
                let guided = self.mode == BackwardMode::Guided;
                let x = self.nodes[inputs[0]].value.data();
                let delta: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(g, xv)| {
                        let mut v = if *xv > 0.0 { *g } else { 0.0 };
                        if guided && v < 0.0 {
                            v = 0.0;
                        }
                        v
                    })
                    .collect();
                self.accumulate(inputs[0], &delta);
            }
            Op::Sigmoid => {
                let y = self.nodes[id].value.data().to_vec();
                let delta: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(&y)
                    .map(|(g, yv)| g * yv * (1.0 - yv))
                    .collect();
                self.accumulate(inputs[0], &delta);
            }
            Op::Sqrt => {
                let y = self.nodes[id].value.data().to_vec();
                let delta: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(&y)
                    .map(|(g, yv)| if *yv > 0.0 { 0.5 * g / yv } else { 0.0 })
                    .collect();
                self.accumulate(inputs[0], &delta);
            }
            Op::RecipClamp { eps } => {
                let eps = *eps;
                let x = self.nodes[inputs[0]].value.data().to_vec();
                let delta: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(&x)
                    .map(|(g, xv)| if *xv > eps { -g / (xv * xv) } else { 0.0 })
                    .collect();
                self.accumulate(inputs[0], &delta);
            }
            Op::Softmax => {
                let y = self.nodes[id].value.data().to_vec();
                let dot: f64 = grad
                    .data()
                    .iter()
                    .zip(&y)
                    .map(|(g, yv)| *g as f64 * *yv as f64)
                    .sum();
                let delta: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(&y)
                    .map(|(g, yv)| yv * (g - dot as f32))
                    .collect();
                self.accumulate(inputs[0], &delta);
            }
            Op::Add => {
                self.accumulate_maybe_scalar(inputs[0], grad.data().to_vec());
                self.accumulate_maybe_scalar(inputs[1], grad.data().to_vec());
            }
            Op::Sub => {
                self.accumulate_maybe_scalar(inputs[0], grad.data().to_vec());
                self.accumulate_maybe_scalar(inputs[1], grad.data().iter().map(|g| -g).collect());
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = self.pairwise(grad, b);
                let db = self.pairwise(grad, a);
                self.accumulate_maybe_scalar(a, da);
                self.accumulate_maybe_scalar(b, db);
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let bv = &self.nodes[b].value;
                let av = &self.nodes[a].value;
                let n = grad.numel();
                let bat = |i: usize| {
                    if bv.is_scalar() {
                        bv.data()[0]
                    } else {
                        bv.data()[i]
                    }
                };
                let aat = |i: usize| {
                    if av.is_scalar() {
                        av.data()[0]
                    } else {
                        av.data()[i]
                    }
                };
                let mut da = Vec::with_capacity(n);
                let mut db = Vec::with_capacity(n);
                for i in 0..n {
                    let g = grad.data()[i];
                    da.push(g / bat(i));
                    db.push(-g * aat(i) / (bat(i) * bat(i)));
                }
                self.accumulate_maybe_scalar(a, da);
                self.accumulate_maybe_scalar(b, db);
            }
            Op::Scale(c) => {
                let c = *c;
                self.accumulate(inputs[0], &grad.data().iter().map(|g| c * g).collect::<Vec<_>>());
            }
            Op::Sum => {
                let n = self.nodes[inputs[0]].value.numel();
                let g = grad.data()[0];
                self.accumulate(inputs[0], &vec![g; n]);
            }
            Op::Mean => {
                let n = self.nodes[inputs[0]].value.numel();
                let g = grad.data()[0] / n as f32;
                self.accumulate(inputs[0], &vec![g; n]);
            }
            Op::SpatialMean => {
                let shape = self.nodes[inputs[0]].value.shape().to_vec();
                let spatial = shape[1] * shape[2] * shape[3];
                let mut delta = Vec::with_capacity(shape[0] * spatial);
                for ch in 0..shape[0] {
                    delta.extend(std::iter::repeat(grad.data()[ch] / spatial as f32).take(spatial));
                }
                self.accumulate(inputs[0], &delta);
            }
            Op::Reshape => {
                self.accumulate(inputs[0], grad.data());
            }
            Op::Concat => {
                let mut offset = 0;
                for &input in &inputs {
                    let n = self.nodes[input].value.numel();
                    let slice: Vec<f32> = grad.data()[offset..offset + n].to_vec();
                    self.accumulate(input, &slice);
                    offset += n;
                }
            }
            Op::Dense => {
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                let ws = self.nodes[w].value.shape().to_vec();
                let (m, n) = (ws[0], ws[1]);
                let xv = self.nodes[x].value.data().to_vec();
                let wv = self.nodes[w].value.data().to_vec();
                let g = grad.data();
                let mut dx = vec![0.0f32; n];
                let mut dw = vec![0.0f32; m * n];
                for row in 0..m {
                    let gr = g[row];
                    if gr == 0.0 {
                        continue;
                    }
                    let wrow = &wv[row * n..(row + 1) * n];
                    for i in 0..n {
                        dx[i] += gr * wrow[i];
                        dw[row * n + i] += gr * xv[i];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, g);
            }
            Op::Conv3d { stride, padding } => {
                let (stride, padding) = (*stride, *padding);
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                let xs = self.nodes[x].value.shape().to_vec();
                let ws = self.nodes[w].value.shape().to_vec();
                let os = self.nodes[id].value.shape().to_vec();
                let (cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
                let (od, oh, ow) = (os[1], os[2], os[3]);
                let xv = self.nodes[x].value.data().to_vec();
                let wv = self.nodes[w].value.data().to_vec();
                let g = grad.data();
                let mut dx = vec![0.0f32; cin * d * h * wd];
                let mut dw = vec![0.0f32; wv.len()];
                let mut db = vec![0.0f32; cout];
                for oc in 0..cout {
                    let obase = oc * od * oh * ow;
                    let mut acc = 0.0f64;
                    for v in &g[obase..obase + od * oh * ow] {
                        acc += *v as f64;
                    }
                    db[oc] = acc as f32;
                    for ic in 0..cin {
                        let xbase = ic * d * h * wd;
                        for zk in 0..kd {
                            for yk in 0..kh {
                                for xk in 0..kw {
                                    let widx = (((oc * cin + ic) * kd + zk) * kh + yk) * kw + xk;
                                    let wgt = wv[widx];
                                    let mut wacc = 0.0f64;
                                    for oz in 0..od {
                                        let iz = oz * stride + zk;
                                        if iz < padding || iz - padding >= d {
                                            continue;
                                        }
                                        let iz = iz - padding;
                                        for oy in 0..oh {
                                            let iy = oy * stride + yk;
                                            if iy < padding || iy - padding >= h {
                                                continue;
                                            }
                                            let iy = iy - padding;
                                            let orow = obase + (oz * oh + oy) * ow;
                                            let xrow = xbase + (iz * h + iy) * wd;
                                            for ox in 0..ow {
                                                let ix = ox * stride + xk;
                                                if ix < padding || ix - padding >= wd {
                                                    continue;
                                                }
                                                let gv = g[orow + ox];
                                                let xi = xrow + ix - padding;
                                                dx[xi] += gv * wgt;
                                                wacc += gv as f64 * xv[xi] as f64;
                                            }
                                        }
                                    }
                                    dw[widx] += wacc as f32;
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, &db);
            }
            Op::MaxPool3d { argmax } => {
                let argmax = argmax.clone();
                let n = self.nodes[inputs[0]].value.numel();
                let mut dx = vec![0.0f32; n];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += grad.data()[o];
                }
                self.accumulate(inputs[0], &dx);
            }
            Op::AvgPool3d { size } => {
                let size = *size;
                let xs = self.nodes[inputs[0]].value.shape().to_vec();
                let (c, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (od, oh, ow) = (d / size, h / size, w / size);
                let norm = 1.0 / (size * size * size) as f32;
                let mut dx = vec![0.0f32; c * d * h * w];
                let g = grad.data();
                for ch in 0..c {
                    for oz in 0..od {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[((ch * od + oz) * oh + oy) * ow + ox] * norm;
                                for dz in 0..size {
                                    for dy in 0..size {
                                        for dx_ in 0..size {
                                            dx[((ch * d + oz * size + dz) * h + oy * size + dy)
                                                * w
                                                + ox * size
                                                + dx_] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(inputs[0], &dx);
            }
            Op::UpsampleNearest3d { factor } => {
                let factor = *factor;
                let xs = self.nodes[inputs[0]].value.shape().to_vec();
                let (c, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (od, oh, ow) = (d * factor, h * factor, w * factor);
                let mut dx = vec![0.0f32; c * d * h * w];
                let g = grad.data();
                for ch in 0..c {
                    for oz in 0..od {
                        for oy in 0..oh {
                            let row = ((ch * od + oz) * oh + oy) * ow;
                            let xrow = ((ch * d + oz / factor) * h + oy / factor) * w;
                            for ox in 0..ow {
                                dx[xrow + ox / factor] += g[row + ox];
                            }
                        }
                    }
                }
                self.accumulate(inputs[0], &dx);
            }
            Op::Gather { index } => {
                let index = *index;
                let n = self.nodes[inputs[0]].value.numel();
                let mut dx = vec![0.0f32; n];
                dx[index] = grad.data()[0];
                self.accumulate(inputs[0], &dx);
            }
            Op::SubsetSums(subsets) => {
                let subsets = subsets.clone();
                let n = self.nodes[inputs[0]].value.numel();
                let mut dx = vec![0.0f32; n];
                for (j, subset) in subsets.iter().enumerate() {
                    let gv = grad.data()[j];
                    for &i in subset {
                        dx[i as usize] += gv;
                    }
                }
                self.accumulate(inputs[0], &dx);
            }
            Op::CrossEntropyLogits { target } => {
                let target = *target;
                let xv = self.nodes[inputs[0]].value.data().to_vec();
                let max = xv.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f64> = xv.iter().map(|v| ((v - max) as f64).exp()).collect();
                let denom: f64 = exps.iter().sum();
                let g = grad.data()[0];
                let delta: Vec<f32> = exps
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let p = (e / denom) as f32;
                        g * (p - if i == target { 1.0 } else { 0.0 })
                    })
                    .collect();
                self.accumulate(inputs[0], &delta);
            }
        }
        Ok(())
    }

    /// grad ⊙ value(other) with scalar broadcast on either side.
    fn pairwise(&self, grad: &Tensor, other: NodeId) -> Vec<f32> {
        let ov = &self.nodes[other].value;
        if ov.is_scalar() {
            let s = ov.data()[0];
            grad.data().iter().map(|g| g * s).collect()
        } else if grad.numel() == ov.numel() {
            grad.data().iter().zip(ov.data()).map(|(g, o)| g * o).collect()
        } else {
            // grad is the scalar side of a scalar-broadcast op.
            debug_assert_eq!(grad.numel(), 1);
            let g = grad.data()[0];
            ov.data().iter().map(|o| g * o).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_conv_kernel_passes_volume_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.0]));
        let y = tape.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq);
        tape.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.backward(0, Tensor::scalar(1.0)),
            Err(TensorError::EmptyTape)
        ));
    }

    #[test]
    fn guided_masks_forward_and_gradient_signs() {
        // f(x) = relu(-x) at x = 1: forward mask kills the gradient.
        let mut tape = Tape::with_mode(BackwardMode::Guided);
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        let neg = tape.scale(x, -1.0);
        let y = tape.relu(neg);
        tape.backward(y, Tensor::from_vec(vec![1.0])).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0]);

        // f(x) = -relu(x) at x = 1: incoming gradient is negative.
        let mut tape = Tape::with_mode(BackwardMode::Guided);
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        let r = tape.relu(x);
        let y = tape.scale(r, -1.0);
        tape.backward(y, Tensor::from_vec(vec![1.0])).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0]);

        // Standard mode keeps the second case alive.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        let r = tape.relu(x);
        let y = tape.scale(r, -1.0);
        tape.backward(y, Tensor::from_vec(vec![1.0])).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn capture_returns_activation_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2], vec![0.5; 8]).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.0]));
        let conv = tape.conv3d(x, w, b, 1, 0).unwrap();
        tape.name_layer("probe", conv).unwrap();
        let y = tape.sum(conv);
        assert!(tape.capture("probe").is_err()); // backward not run yet
        tape.backward(y, Tensor::scalar(1.0)).unwrap();
        let (act, grad) = tape.capture("probe").unwrap();
        assert_eq!(act.data(), &[0.5; 8]);
        assert_eq!(grad.data(), &[1.0; 8]); // d(sum)/dx = 1
        assert!(matches!(
            tape.capture("nope"),
            Err(TensorError::UnknownLayer(_))
        ));
    }
}
