use std::fmt;

use super::kernels::{
    col2im3x3_acc, conv3x3_out_extent, im2col3x3, matmul_acc, matmul_nt_acc, matmul_tn_acc,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Every differentiable operation the tape knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Conv1x1,
    Conv3x3,
    Relu,
    SoftmaxRows,
    GlobalAvgPool,
    Reshape,
    Transpose2d,
    ConcatChannels,
    Add,
    Mul,
    Scale,
    Sum,
    UpsampleNearest,
    ColumnEmbed,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::MatMul,
        OpKind::Conv1x1,
        OpKind::Conv3x3,
        OpKind::Relu,
        OpKind::SoftmaxRows,
        OpKind::GlobalAvgPool,
        OpKind::Reshape,
        OpKind::Transpose2d,
        OpKind::ConcatChannels,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::UpsampleNearest,
        OpKind::ColumnEmbed,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv1x1 => "conv1x1",
            OpKind::Conv3x3 => "conv3x3",
            OpKind::Relu => "relu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Reshape => "reshape",
            OpKind::Transpose2d => "transpose2d",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::ColumnEmbed => "column_embed",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv1x1 { x: Var, w: Var, b: Option<Var> },
    Conv3x3 { x: Var, w: Var, b: Option<Var>, stride: usize, cols: Vec<f64> },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Transpose2d { x: Var },
    ConcatChannels { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    UpsampleNearest { x: Var, factor: usize },
    ColumnEmbed { d: Var, w: Var, b: Option<Var> },
    CrossEntropy { logits: Var, labels: Vec<u8>, ignore: u8, probs: Vec<f64>, count: usize },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv1x1 { .. } => OpKind::Conv1x1,
            Op::Conv3x3 { .. } => OpKind::Conv3x3,
            Op::Relu { .. } => OpKind::Relu,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose2d { .. } => OpKind::Transpose2d,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::UpsampleNearest { .. } => OpKind::UpsampleNearest,
            Op::ColumnEmbed { .. } => OpKind::ColumnEmbed,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        })
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Define-by-run tape. Nodes are appended in execution order, so the node
/// vector is already a topological order and backward is a reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of `kind` (upstream gradient scaled by 1.5).
    /// Used to prove the gradient checker notices a broken derivative.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a trainable input whose gradient will be collected.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reachable and tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let kind = op.kind().expect("non-leaf op");
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: kind.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("{op} expects a matrix"),
            }),
        }
    }

    fn feature_dims(&self, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v).chw()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `y[c',h,w] = b[c'] + Σ_c w[c',c]·x[c,h,w]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (c, h, wd) = self.feature_dims(x)?;
        let (co, ci) = self.matrix_dims(w, "conv1x1")?;
        if ci != c {
            return Err(Error::dim("conv1x1", self.shape(w), self.shape(x)));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::dim("conv1x1 bias", self.shape(b), &[co]));
            }
        }
        let plane = h * wd;
        let mut out = vec![0.0; co * plane];
        matmul_acc(&mut out, self.value(w).data(), self.value(x).data(), co, c, plane);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), plane);
        }
        let value = Tensor::new(&[co, h, wd], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Conv1x1 { x, w, b }, &inputs)
    }

    /// 3×3 cross-correlation with zero padding 1 and stride 1 or 2.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!(
                "conv3x3 supports stride 1 or 2, got {stride}"
            )));
        }
        let (c, h, wd) = self.feature_dims(x)?;
        let co = match *self.shape(w) {
            [co, ci, 3, 3] if ci == c => co,
            _ => return Err(Error::dim("conv3x3", self.shape(w), self.shape(x))),
        };
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::dim("conv3x3 bias", self.shape(b), &[co]));
            }
        }
        let ho = conv3x3_out_extent(h, stride);
        let wo = conv3x3_out_extent(wd, stride);
        let plane = ho * wo;
        let cols = im2col3x3(self.value(x).data(), c, h, wd, stride);
        let mut out = vec![0.0; co * plane];
        matmul_acc(&mut out, self.value(w).data(), &cols, co, c * 9, plane);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), plane);
        }
        let value = Tensor::new(&[co, ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Conv3x3 { x, w, b, stride, cols }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.matrix_dims(x, "softmax_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; p * q];
        for (row_in, row_out) in src.chunks_exact(q).zip(out.chunks_exact_mut(q)) {
            let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in row_out.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::new(&[p, q], out)?;
        self.push(value, Op::SoftmaxRows { x }, &[x])
    }

    /// Spatial mean per channel: `C×H×W → C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.feature_dims(x)?;
        let plane = h * w;
        let out = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[c], out)?;
        self.push(value, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose2d")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        self.push(value, Op::Transpose2d { x }, &[x])
    }

    /// Stacks feature maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_channels needs at least one input".into()))?;
        let (_, h, w) = self.feature_dims(first)?;
        let mut channels = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.feature_dims(p)?;
            if (ph, pw) != (h, w) {
                return Err(Error::dim("concat_channels", self.shape(first), self.shape(p)));
            }
            channels += c;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[channels, h, w], out)?;
        self.push(
            value,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.shape(), vb.shape()));
        }
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape(), out)?;
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("mul", va.shape(), vb.shape()));
        }
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape(), out)?;
        self.push(value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|v| v * factor).collect())?;
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Repeats every pixel `factor` times along H and W.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        let (c, h, w) = self.feature_dims(x)?;
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                let srow = &src[ch * h * w + (y / factor) * w..][..w];
                let drow = &mut out[ch * ho * wo + y * wo..][..wo];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / factor];
                }
            }
        }
        let value = Tensor::new(&[c, ho, wo], out)?;
        self.push(value, Op::UpsampleNearest { x, factor }, &[x])
    }

    /// Embeds each entry of a descriptor `d[C]` through its own weight
    /// column: `out[e,p] = w[e,p]·d[p] + b[e]`, giving an `E×C` matrix whose
    /// column `p` is the embedding of channel `p`.
    pub fn column_embed(&mut self, d: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let c = match *self.shape(d) {
            [c] => c,
            ref s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "column_embed expects a vector descriptor".into(),
                })
            }
        };
        let (e, wc) = self.matrix_dims(w, "column_embed")?;
        if wc != c {
            return Err(Error::dim("column_embed", self.shape(w), self.shape(d)));
        }
        if let Some(b) = b {
            if self.shape(b) != [e] {
                return Err(Error::dim("column_embed bias", self.shape(b), &[e]));
            }
        }
        let dv = self.value(d).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; e * c];
        for i in 0..e {
            let bias = bv.map_or(0.0, |b| b[i]);
            for p in 0..c {
                out[i * c + p] = wv[i * c + p] * dv[p] + bias;
            }
        }
        let value = Tensor::new(&[e, c], out)?;
        let inputs: Vec<Var> = [Some(d), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::ColumnEmbed { d, w, b }, &inputs)
    }

    /// Mean per-pixel categorical cross-entropy of `logits[K×H×W]` against
    /// `labels[H·W]`. Pixels labelled `ignore` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let (k, h, w) = self.feature_dims(logits)?;
        let plane = h * w;
        if labels.len() != plane {
            return Err(Error::dim("cross_entropy", &[k, h, w], &[labels.len()]));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; k * plane];
        let mut total = 0.0;
        let mut count = 0usize;
        for (pix, &label) in labels.iter().enumerate() {
            if label == ignore {
                continue;
            }
            if label as usize >= k {
                return Err(Error::LabelRange {
                    label: label as u32,
                    classes: k,
                });
            }
            let max = (0..k)
                .map(|c| src[c * plane + pix])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut norm = 0.0;
            for c in 0..k {
                let e = (src[c * plane + pix] - max).exp();
                probs[c * plane + pix] = e;
                norm += e;
            }
            for c in 0..k {
                probs[c * plane + pix] /= norm;
            }
            total += norm.ln() + max - src[label as usize * plane + pix];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Degenerate(
                "every pixel carries the ignore label".into(),
            ));
        }
        let value = Tensor::scalar(total / count as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients of all tracked nodes are
    /// overwritten; accumulation across steps is the caller's business.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let fault = node.op.kind().is_some() && node.op.kind() == self.fault;
            let upstream: Vec<f64> = if fault {
                g.iter().map(|v| v * 1.5).collect()
            } else {
                std::mem::take(&mut g)
            };
            self.propagate(i, &upstream, &mut grads);
            grads[i] = Some(if fault { g } else { upstream });
        }
        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.grad = grad;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = slot(nodes, grads, a) {
                    matmul_nt_acc(da, g, val(b), m, n, k);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    matmul_tn_acc(db, val(a), g, k, m, n);
                }
            }
            &Op::Conv1x1 { x, w, b } => {
                let (c, h, wd) = nodes[x.0].value.chw().expect("conv1x1 input");
                let co = nodes[w.0].value.shape()[0];
                let plane = h * wd;
                if let Some(dw) = slot(nodes, grads, w) {
                    matmul_nt_acc(dw, g, val(x), co, plane, c);
                }
                if let Some(dx) = slot(nodes, grads, x) {
                    matmul_tn_acc(dx, val(w), g, c, co, plane);
                }
                if let Some(b) = b {
                    if let Some(db) = slot(nodes, grads, b) {
                        acc_channel_sums(db, g, plane);
                    }
                }
            }
            Op::Conv3x3 {
                x,
                w,
                b,
                stride,
                cols,
            } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let (c, h, wd) = nodes[x.0].value.chw().expect("conv3x3 input");
                let co = nodes[w.0].value.shape()[0];
                let plane = nodes[i].value.shape()[1] * nodes[i].value.shape()[2];
                if let Some(dw) = slot(nodes, grads, w) {
                    matmul_nt_acc(dw, g, cols, co, plane, c * 9);
                }
                if nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; c * 9 * plane];
                    matmul_tn_acc(&mut dcols, val(w), g, c * 9, co, plane);
                    if let Some(dx) = slot(nodes, grads, x) {
                        col2im3x3_acc(dx, &dcols, c, h, wd, stride);
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = slot(nodes, grads, b) {
                        acc_channel_sums(db, g, plane);
                    }
                }
            }
            &Op::Relu { x } => {
                let input = val(x);
                if let Some(dx) = slot(nodes, grads, x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(input) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::SoftmaxRows { x } => {
                let y = nodes[i].value.data();
                let q = nodes[i].value.shape()[1];
                if let Some(dx) = slot(nodes, grads, x) {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(q)
                        .zip(g.chunks_exact(q))
                        .zip(y.chunks_exact(q))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            &Op::GlobalAvgPool { x } => {
                let (_, h, w) = nodes[x.0].value.chw().expect("gap input");
                let plane = h * w;
                if let Some(dx) = slot(nodes, grads, x) {
                    for (ch, &gv) in dx.chunks_exact_mut(plane).zip(g) {
                        let share = gv / plane as f64;
                        ch.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = slot(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            &Op::Transpose2d { x } => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                if let Some(dx) = slot(nodes, grads, x) {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::ConcatChannels { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(dp) = slot(nodes, grads, p) {
                        dp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, gv)| *d += gv);
                    }
                    offset += len;
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(dv) = slot(nodes, grads, v) {
                        dv.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = slot(nodes, grads, a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(val(b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = slot(nodes, grads, b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(val(a)) {
                        *d += gv * av;
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(dx) = slot(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += factor * gv);
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = slot(nodes, grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::UpsampleNearest { x, factor } => {
                let (c, h, w) = nodes[x.0].value.chw().expect("upsample input");
                let (ho, wo) = (h * factor, w * factor);
                if let Some(dx) = slot(nodes, grads, x) {
                    for ch in 0..c {
                        for y in 0..ho {
                            let grow = &g[ch * ho * wo + y * wo..][..wo];
                            let drow = &mut dx[ch * h * w + (y / factor) * w..][..w];
                            for (xo, gv) in grow.iter().enumerate() {
                                drow[xo / factor] += gv;
                            }
                        }
                    }
                }
            }
            &Op::ColumnEmbed { d, w, b } => {
                let (e, c) = (nodes[w.0].value.shape()[0], nodes[w.0].value.shape()[1]);
                let (dv, wv) = (val(d), val(w));
                if let Some(dw) = slot(nodes, grads, w) {
                    for r in 0..e {
                        for p in 0..c {
                            dw[r * c + p] += g[r * c + p] * dv[p];
                        }
                    }
                }
                if let Some(dd) = slot(nodes, grads, d) {
                    for r in 0..e {
                        for p in 0..c {
                            dd[p] += g[r * c + p] * wv[r * c + p];
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = slot(nodes, grads, b) {
                        acc_channel_sums(db, g, c);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                let k = nodes[logits.0].value.shape()[0];
                let plane = labels.len();
                let scale = g[0] / *count as f64;
                if let Some(dl) = slot(nodes, grads, *logits) {
                    for (pix, &label) in labels.iter().enumerate() {
                        if label == *ignore {
                            continue;
                        }
                        for c in 0..k {
                            let target = if c == label as usize { 1.0 } else { 0.0 };
                            dl[c * plane + pix] += scale * (probs[c * plane + pix] - target);
                        }
                    }
                }
            }
        }
    }
}

/// Accumulator for an input's gradient; `None` when it is untracked.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (ch, &b) in out.chunks_exact_mut(plane).zip(bias) {
        ch.iter_mut().for_each(|v| *v += b);
    }
}

fn acc_channel_sums(db: &mut [f64], g: &[f64], plane: usize) {
    for (d, ch) in db.iter_mut().zip(g.chunks_exact(plane)) {
        *d += ch.iter().sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(&[rows, cols], v.to_vec()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum()
        })
    }

    #[test]
    fn matmul_matches_loop_oracle() {
        let a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = mat(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let oracle = triple_loop(&a, &b);
        assert_eq!(oracle.data(), &[19.0, 22.0, 43.0, 50.0]);

        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b));
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.value(c), &oracle);

        let eye = g.constant(Tensor::eye(2));
        let c = g.matmul(va, eye).unwrap();
        assert_eq!(g.value(c), &a);

        let zero = g.constant(Tensor::zeros(&[2, 3]));
        let c = g.matmul(va, zero).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv1x1_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 1, 1], vec![1.0, 2.0]).unwrap());
        let w = g.constant(mat(1, 2, &[1.0, 1.0]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv1x1(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);

        let xs = Tensor::from_fn(&[3, 2, 4], |i| i as f64 * 0.5 - 3.0);
        let x = g.constant(xs.clone());
        let eye = g.constant(Tensor::eye(3));
        let y = g.conv1x1(x, eye, None).unwrap();
        assert_eq!(g.value(y), &xs);

        let zero = g.constant(Tensor::zeros(&[5, 3]));
        let y = g.conv1x1(x, zero, None).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 2, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let bad = g.constant(Tensor::zeros(&[5, 4]));
        assert!(matches!(g.conv1x1(x, bad, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv3x3_examples() {
        let mut g = Graph::new();
        let xs = Tensor::from_fn(&[1, 5, 6], |i| (i as f64).cos());
        let x = g.constant(xs.clone());
        let delta = g.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 }));
        let y = g.conv3x3(x, delta, None, 1).unwrap();
        assert_eq!(g.value(y), &xs);

        let cst = g.constant(Tensor::full(&[1, 5, 5], 2.5));
        let ones = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv3x3(cst, ones, None, 1).unwrap();
        assert_eq!(g.value(y).at(&[0, 2, 2]), 9.0 * 2.5);
        // corner sees only a 2×2 window under zero padding
        assert_eq!(g.value(y).at(&[0, 0, 0]), 4.0 * 2.5);

        let zero = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = g.conv3x3(x, zero, None, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        assert!(matches!(g.conv3x3(x, delta, None, 3), Err(Error::Config(_))));
    }

    #[test]
    fn relu_and_gate() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 4], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = g.constant(mat(1, 2, &[0.0, 3f64.ln()]));
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);

        // very large logits do not overflow
        let x = g.constant(mat(1, 2, &[1000.0, 1000.0 + 3f64.ln()]));
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gap_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap());
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5, 7.0]);
        let x = g.constant(Tensor::new(&[3, 1, 1], vec![1.0, -2.0, 3.5]).unwrap());
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn data_movement_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 4]));
        let b = g.constant(Tensor::zeros(&[5, 3, 4]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[7, 3, 4]);
        let d = g.constant(Tensor::zeros(&[1, 3, 5]));
        assert!(g.concat_channels(&[a, d]).is_err());
        assert!(g.add(a, b).is_err());

        let one = g.constant(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
        let up = g.upsample_nearest(one, 2).unwrap();
        assert_eq!(g.value(up).shape(), &[1, 2, 2]);
        assert_eq!(g.value(up).data(), &[1.0; 4]);

        let m = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let t = g.transpose2d(m).unwrap();
        let tt = g.transpose2d(t).unwrap();
        assert_eq!(g.value(tt), g.value(m));
        assert_eq!(g.value(t).at(&[2, 1]), 5.0);
        assert!(g.reshape(m, &[4, 2]).is_err());
    }

    #[test]
    fn backward_simple_losses() {
        let xs = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let mut g = Graph::new();
        let x = g.param(xs.clone());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.param(xs.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap(), xs.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1], vec![f64::MAX]).unwrap());
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref op } if op == "scale"));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[6, 2, 2]));
        let loss = g.cross_entropy(logits, &[0, 1, 2, 5], 255).unwrap();
        assert!((g.value(loss).item() - 6f64.ln()).abs() < 1e-15);

        let logits = g.param(Tensor::new(&[2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
        let loss = g.cross_entropy(logits, &[1], 255).unwrap();
        assert!((g.value(loss).item() + 0.75f64.ln()).abs() < 1e-15);

        let logits = g.param(Tensor::zeros(&[2, 1, 2]));
        assert!(matches!(
            g.cross_entropy(logits, &[255, 255], 255),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            g.cross_entropy(logits, &[0, 2], 255),
            Err(Error::LabelRange { .. })
        ));
    }
}
