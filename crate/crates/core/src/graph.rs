//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so insertion order is a topological order
//! and [`Graph::backward`] simply walks the tape in reverse.
//!
//! ```
//! use fewshot::graph::Graph;
//! use fewshot::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
//! let y = g.relu(x).unwrap();
//! let loss = g.sum(y).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&g, x).data(), &[1.0, 0.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for instrumentation (`Graph::count`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    Relu,
    MaxPool2,
    Linear,
    Softmax,
    Dropout,
    Sum,
    Mean,
    Add,
    Sub,
    Mul,
    Scale,
    Reshape,
    ChannelStacks,
    TakeCols,
    WeightedSum,
    Stack,
    PairwiseDistance,
    CrossEntropy,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Softmax {
        x: Var,
    },
    Dropout {
        x: Var,
        /// Per-channel multiplier `mask[c] / keep`.
        scale: Vec<f64>,
        mask: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Reshape {
        x: Var,
    },
    ChannelStacks {
        x: Var,
        rows: Vec<usize>,
        pad_to: usize,
    },
    TakeCols {
        x: Var,
        m: usize,
    },
    WeightedSum {
        weights: Var,
        stacks: Var,
    },
    Stack {
        items: Vec<Var>,
    },
    PairwiseDistance {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Linear { .. } => OpKind::Linear,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::ChannelStacks { .. } => OpKind::ChannelStacks,
            Op::TakeCols { .. } => OpKind::TakeCols,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Stack { .. } => OpKind::Stack,
            Op::PairwiseDistance { .. } => OpKind::PairwiseDistance,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; build one per episode.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when the loss
    /// does not depend on it.
    pub fn get(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        let shape = graph.value(v).shape();
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(shape, g.clone()).expect("gradient shape mirrors value"))
    }

    /// Like [`Gradients::get`], but an unused leaf gets an all-zero gradient.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(graph, v)
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}

fn shape_err<T>(op: &str, msg: String) -> Result<T> {
    Err(Error::Shape(format!("{op}: {msg}")))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Number of recorded operations of the given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Which side of every non-smooth point the recorded forward pass took:
    /// one entry per ReLU input (1 if positive) and per max-pool window
    /// (index of the winner), in tape order. Two passes with equal
    /// patterns lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu { x } => out.extend(self.value(*x).data().iter().map(|&v| (v > 0.0) as usize)),
                Op::MaxPool2 { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// The 0/1 channel masks of every dropout application, in tape order.
    pub fn dropout_masks(&self) -> Vec<&[f64]> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Dropout { mask, .. } => Some(mask.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// A leaf that never receives a gradient (inputs, data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    /// `x: [n, cin, h, w]`, `kernel: [cout, cin, 3, 3]`, `bias: [cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        let bs = self.shape(bias);
        if xs.len() != 4 || ks.len() != 4 {
            return shape_err("conv2d", format!("x {xs:?}, kernel {ks:?}"));
        }
        if ks[2] != 3 || ks[3] != 3 {
            return shape_err("conv2d", format!("kernel must be 3x3, got {ks:?}"));
        }
        if ks[1] != xs[1] {
            return shape_err(
                "conv2d",
                format!("input has {} channels but kernel expects {}", xs[1], ks[1]),
            );
        }
        if bs != [ks[0]] {
            return shape_err("conv2d", format!("bias {bs:?} for {} filters", ks[0]));
        }
        let dims = ConvDims {
            n: xs[0],
            cin: xs[1],
            cout: ks[0],
            h: xs[2],
            w: xs[3],
        };
        let keep = self.any_grad(&[x, kernel, bias]);
        let mut out = vec![0.0; dims.n * dims.cout * dims.h * dims.w];
        let cols = kernels::conv3_forward(
            dims,
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &mut out,
            keep,
        )
        .unwrap_or_default();
        let value = Tensor::new(&[dims.n, dims.cout, dims.h, dims.w], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                dims,
                cols,
            },
            &[x, kernel, bias],
        )
    }

    /// Batch normalisation using the statistics of exactly this batch
    /// (population variance over `n·h·w` per channel). No running
    /// statistics are kept.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err("batchnorm", format!("x {xs:?} needs [n, c, ...]"));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(
                "batchnorm",
                format!(
                    "gamma {:?} / beta {:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        let hw: usize = xs[2..].iter().product();
        let mut out = vec![0.0; self.value(x).numel()];
        let (xhat, inv_std) = kernels::batchnorm_forward(
            self.value(x).data(),
            xs[0],
            c,
            hw,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            &mut out,
        );
        let value = Tensor::new(&xs, out)?;
        self.push(
            "batchnorm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    /// 2×2 max pooling with stride 2 over the last two axes of `[n, c, h, w]`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return shape_err("maxpool2", format!("needs [n, c, h>=2, w>=2], got {xs:?}"));
        }
        let (oh, ow) = (xs[2] / 2, xs[3] / 2);
        let planes = xs[0] * xs[1];
        let mut out = vec![0.0; planes * oh * ow];
        let argmax = kernels::maxpool2_forward(self.value(x).data(), planes, xs[2], xs[3], &mut out);
        let value = Tensor::new(&[xs[0], xs[1], oh, ow], out)?;
        self.push("maxpool2", value, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// `x · weightᵀ + bias` for `x: [n, d]`, `weight: [m, d]`, `bias: [m]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(bias) != [ws[0]] {
            return shape_err(
                "linear",
                format!("x {xs:?}, weight {ws:?}, bias {:?}", self.shape(bias)),
            );
        }
        let (n, d, m) = (xs[0], xs[1], ws[0]);
        let b = self.value(bias).data();
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
        kernels::gemm(
            n,
            d,
            m,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            true,
            1.0,
            &mut out,
        );
        let value = Tensor::new(&[n, m], out)?;
        self.push(
            "linear",
            value,
            Op::Linear { x, weight, bias },
            &[x, weight, bias],
        )
    }

    /// Softmax along the last axis with max-shift.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = *t
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push("softmax", value, Op::Softmax { x }, &[x])
    }

    /// Inverted channel dropout: `out[n, c, ..] = x[n, c, ..] · mask[c] / keep`.
    pub fn dropout(&mut self, x: Var, mask: &[f64], keep: f64) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Parameter(format!("keep probability {keep} not in (0, 1]")));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[1] != mask.len() {
            return shape_err(
                "dropout",
                format!("mask of {} channels for input {xs:?}", mask.len()),
            );
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Parameter("dropout mask must be 0/1".into()));
        }
        let c = xs[1];
        let hw: usize = xs[2..].iter().product();
        let scale: Vec<f64> = mask.iter().map(|m| m / keep).collect();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_exact_mut(hw).enumerate() {
            let s = scale[i % c];
            plane.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(&xs, out)?;
        let op = Op::Dropout {
            x,
            scale,
            mask: mask.to_vec(),
        };
        self.push("dropout", value, op, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", value, Op::Mean { x }, &[x])
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v * factor).collect())?;
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Regroups per-example feature maps into per-channel stacks.
    ///
    /// `x: [n, c, s...]`. Returns `[c, pad_to, s...]` where
    /// `out[k, j] = x[rows[j], k]` for `j < rows.len()` and zero beyond.
    pub fn channel_stacks(&mut self, x: Var, rows: &[usize], pad_to: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err("channel_stacks", format!("x {xs:?}"));
        }
        if rows.is_empty() || rows.len() > pad_to {
            return shape_err(
                "channel_stacks",
                format!("{} rows for a stack of depth {pad_to}", rows.len()),
            );
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= xs[0]) {
            return shape_err("channel_stacks", format!("row {r} out of {}", xs[0]));
        }
        let c = xs[1];
        let s: usize = xs[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; c * pad_to * s];
        for k in 0..c {
            for (j, &r) in rows.iter().enumerate() {
                let from = (r * c + k) * s;
                let to = (k * pad_to + j) * s;
                out[to..to + s].copy_from_slice(&src[from..from + s]);
            }
        }
        let mut shape = vec![c, pad_to];
        shape.extend_from_slice(&xs[2..]);
        let value = Tensor::new(&shape, out)?;
        let op = Op::ChannelStacks {
            x,
            rows: rows.to_vec(),
            pad_to,
        };
        self.push("channel_stacks", value, op, &[x])
    }

    /// First `m` columns of `x: [n, width]`.
    pub fn take_cols(&mut self, x: Var, m: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || m == 0 || m > xs[1] {
            return shape_err("take_cols", format!("{m} columns of {xs:?}"));
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(xs[1])
            .flat_map(|row| row[..m].iter().copied())
            .collect();
        let value = Tensor::new(&[xs[0], m], data)?;
        self.push("take_cols", value, Op::TakeCols { x, m }, &[x])
    }

    /// `out[b] = Σ_{i<m} weights[b, i] · stacks[b, i]` for `weights: [B, m]`
    /// and `stacks: [B, M, s...]` with `m ≤ M`. Returns `[B, s...]`.
    pub fn weighted_sum(&mut self, weights: Var, stacks: Var) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        let ss = self.shape(stacks).to_vec();
        if ws.len() != 2 || ss.len() < 2 || ws[0] != ss[0] || ws[1] > ss[1] {
            return shape_err("weighted_sum", format!("weights {ws:?}, stacks {ss:?}"));
        }
        let (b, m, depth) = (ws[0], ws[1], ss[1]);
        let s: usize = ss[2..].iter().product();
        let w = self.value(weights).data();
        let st = self.value(stacks).data();
        let mut out = vec![0.0; b * s];
        for bi in 0..b {
            let dst = &mut out[bi * s..(bi + 1) * s];
            for i in 0..m {
                let wi = w[bi * m + i];
                let src = &st[(bi * depth + i) * s..(bi * depth + i + 1) * s];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += wi * v;
                }
            }
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&ss[2..]);
        let value = Tensor::new(&shape, out)?;
        self.push(
            "weighted_sum",
            value,
            Op::WeightedSum { weights, stacks },
            &[weights, stacks],
        )
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = items.iter().map(|&v| self.value(v).clone()).collect();
        let value = Tensor::stack(&tensors)?;
        let op = Op::Stack {
            items: items.to_vec(),
        };
        self.push("stack", value, op, items)
    }

    /// Euclidean distances between every row of `a: [q, d]` and `b: [c, d]`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err("pairwise_distance", format!("{sa:?} vs {sb:?}"));
        }
        let (q, c, d) = (sa[0], sb[0], sa[1]);
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; q * c];
        for i in 0..q {
            let ra = &ta[i * d..(i + 1) * d];
            for j in 0..c {
                let rb = &tb[j * d..(j + 1) * d];
                out[i * c + j] = ra
                    .iter()
                    .zip(rb)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let value = Tensor::new(&[q, c], out)?;
        self.push("pairwise_distance", value, Op::PairwiseDistance { a, b }, &[a, b])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` row-wise.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return shape_err(
                "cross_entropy",
                format!("logits {ls:?} for {} labels", labels.len()),
            );
        }
        let c = ls[1];
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return shape_err("cross_entropy", format!("label {y} outside 0..{c}"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &y) in probs.chunks_exact_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[y];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", value, op, &[logits])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Returns a zero-initialised accumulator for `v`, or None when `v`
        // needs no gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                kernel,
                bias,
                dims,
                cols,
            } => {
                let kdata = self.value(*kernel).data();
                if let Some(dk) = slot!(*kernel) {
                    kernels::conv3_backward(*dims, cols, kdata, g, None, Some(dk), None);
                }
                if let Some(db) = slot!(*bias) {
                    kernels::conv3_backward(*dims, cols, kdata, g, None, None, Some(db));
                }
                if let Some(dx) = slot!(*x) {
                    kernels::conv3_backward(*dims, cols, kdata, g, Some(dx), None, None);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let hw: usize = xs[2..].iter().product();
                let gdata = self.value(*gamma).data();
                // gamma/beta gradients are per-channel; compute them into
                // scratch so a single sweep serves all three inputs.
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                match slot!(*x) {
                    Some(dx) => kernels::batchnorm_backward(
                        g,
                        xhat,
                        inv_std,
                        gdata,
                        n,
                        c,
                        hw,
                        Some(dx),
                        Some(&mut dgamma),
                        Some(&mut dbeta),
                    ),
                    None => kernels::batchnorm_backward(
                        g,
                        xhat,
                        inv_std,
                        gdata,
                        n,
                        c,
                        hw,
                        None,
                        Some(&mut dgamma),
                        Some(&mut dbeta),
                    ),
                }
                if let Some(dst) = slot!(*gamma) {
                    add_into(dst, &dgamma);
                }
                if let Some(dst) = slot!(*beta) {
                    add_into(dst, &dbeta);
                }
            }
            Op::Relu { x } => {
                if let Some(dx) = slot!(*x) {
                    for ((d, gi), v) in dx.iter_mut().zip(g).zip(node.value.data()) {
                        if *v > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(dx) = slot!(*x) {
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                }
            }
            Op::Linear { x, weight, bias } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*weight)[0];
                if let Some(dw) = slot!(*weight) {
                    kernels::gemm(m, n, d, g, true, self.value(*x).data(), false, 1.0, dw);
                }
                if let Some(db) = slot!(*bias) {
                    for row in g.chunks_exact(m) {
                        add_into(db, row);
                    }
                }
                if let Some(dx) = slot!(*x) {
                    kernels::gemm(n, m, d, g, false, self.value(*weight).data(), false, 1.0, dx);
                }
            }
            Op::Softmax { x } => {
                if let Some(dx) = slot!(*x) {
                    let m = *node.value.shape().last().unwrap();
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(m)
                        .zip(g.chunks_exact(m))
                        .zip(node.value.data().chunks_exact(m))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Dropout { x, scale, .. } => {
                if let Some(dx) = slot!(*x) {
                    let xs = self.shape(*x);
                    let c = xs[1];
                    let hw: usize = xs[2..].iter().product();
                    for (i, (dplane, gplane)) in dx.chunks_exact_mut(hw).zip(g.chunks_exact(hw)).enumerate() {
                        let s = scale[i % c];
                        for (d, gi) in dplane.iter_mut().zip(gplane) {
                            *d += s * gi;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = slot!(*x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = slot!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = slot!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = slot!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = slot!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = slot!(*a) {
                    let vb = self.value(*b).data();
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = slot!(*b) {
                    let va = self.value(*a).data();
                    for ((d, gi), y) in db.iter_mut().zip(g).zip(va) {
                        *d += gi * y;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += factor * gi);
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = slot!(*x) {
                    add_into(dx, g);
                }
            }
            Op::ChannelStacks { x, rows, pad_to } => {
                if let Some(dx) = slot!(*x) {
                    let xs = self.shape(*x);
                    let c = xs[1];
                    let s: usize = xs[2..].iter().product();
                    for k in 0..c {
                        for (j, &r) in rows.iter().enumerate() {
                            let to = (r * c + k) * s;
                            let from = (k * pad_to + j) * s;
                            add_into(&mut dx[to..to + s], &g[from..from + s]);
                        }
                    }
                }
            }
            Op::TakeCols { x, m } => {
                if let Some(dx) = slot!(*x) {
                    let width = self.shape(*x)[1];
                    for (drow, grow) in dx.chunks_exact_mut(width).zip(g.chunks_exact(*m)) {
                        add_into(&mut drow[..*m], grow);
                    }
                }
            }
            Op::WeightedSum { weights, stacks } => {
                let ws = self.shape(*weights);
                let ss = self.shape(*stacks);
                let (b, m, depth) = (ws[0], ws[1], ss[1]);
                let s: usize = ss[2..].iter().product();
                if let Some(dw) = slot!(*weights) {
                    let st = self.value(*stacks).data();
                    for bi in 0..b {
                        let gb = &g[bi * s..(bi + 1) * s];
                        for i in 0..m {
                            let src = &st[(bi * depth + i) * s..(bi * depth + i + 1) * s];
                            dw[bi * m + i] += gb.iter().zip(src).map(|(a, c)| a * c).sum::<f64>();
                        }
                    }
                }
                if let Some(ds) = slot!(*stacks) {
                    let w = self.value(*weights).data();
                    for bi in 0..b {
                        let gb = &g[bi * s..(bi + 1) * s];
                        for i in 0..m {
                            let wi = w[bi * m + i];
                            let dst = &mut ds[(bi * depth + i) * s..(bi * depth + i + 1) * s];
                            dst.iter_mut().zip(gb).for_each(|(d, gi)| *d += wi * gi);
                        }
                    }
                }
            }
            Op::Stack { items } => {
                let s = node.value.numel() / items.len();
                for (i, &item) in items.iter().enumerate() {
                    if let Some(d) = slot!(item) {
                        add_into(d, &g[i * s..(i + 1) * s]);
                    }
                }
            }
            Op::PairwiseDistance { a, b } => {
                let (q, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let c = self.shape(*b)[0];
                let dist = node.value.data();
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                // d/da ||a - b|| = (a - b) / ||a - b||; zero subgradient at 0.
                let coef = |i: usize, j: usize| {
                    let dij = dist[i * c + j];
                    if dij > 0.0 {
                        g[i * c + j] / dij
                    } else {
                        0.0
                    }
                };
                if let Some(da) = slot!(*a) {
                    for i in 0..q {
                        for j in 0..c {
                            let k = coef(i, j);
                            if k == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                da[i * d + t] += k * (ta[i * d + t] - tb[j * d + t]);
                            }
                        }
                    }
                }
                if let Some(db) = slot!(*b) {
                    for i in 0..q {
                        for j in 0..c {
                            let k = coef(i, j);
                            if k == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                db[j * d + t] -= k * (ta[i * d + t] - tb[j * d + t]);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(dl) = slot!(*logits) {
                    let c = self.shape(*logits)[1];
                    let s = g[0] / labels.len() as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == y { 1.0 } else { 0.0 };
                            dl[r * c + j] += s * (probs[r * c + j] - target);
                        }
                    }
                }
            }
        }
    }
}

/// Max-shifted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
