//! The computation tape.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s in execution
//! order. [`Graph::backward`] replays the record once, in reverse, and hands
//! back a [`Gradients`] map. Shape misuse of a primitive is a programming
//! error and panics; numeric failures surface as [`Error`]s.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom};
use super::{broadcast_to, broadcastable, pad_shape, reduce_to, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Primitive kinds, used for op-count audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    MatMul,
    Transpose,
    Conv2d,
    MaxPool,
    Sum,
    Broadcast,
    Reshape,
    Relu,
    Exp,
    Log,
    Sqrt,
    Pow,
    Softmax,
    LogSoftmax,
    Concat,
    SelectRows,
    Gather,
    L2Norm,
    Normalize,
}

/// Per-kind op counts plus multiply-accumulate totals of one tape.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub counts: BTreeMap<OpKind, usize>,
    /// Multiply-accumulates spent in matrix products and convolutions.
    pub macs: u64,
}

impl OpStats {
    pub fn count(&self, kind: OpKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, arg: Vec<usize> },
    Sum(Var),
    Broadcast(Var),
    Reshape(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    SqrtClamped(Var),
    Pow(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    SelectRows { x: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    RowL2Norm(Var),
    Normalize {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        /// Inverse standard deviation per statistics group.
        inv: Vec<f64>,
        group: NormGroup,
    },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum NormGroup {
    /// One group per channel over batch and space.
    Channel,
    /// One group per (sample, channel) over space.
    SampleChannel,
    /// Statistics were given, not computed.
    Fixed,
}

/// Where [`Graph::normalize`] takes its statistics from.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Per channel over batch and spatial axes (biased variance).
    Batch,
    /// Per sample and channel over spatial axes.
    Instance,
    /// Given per-channel mean and variance.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Sum(..) => OpKind::Sum,
            Op::Broadcast(..) => OpKind::Broadcast,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sqrt(..) | Op::SqrtClamped(..) => OpKind::Sqrt,
            Op::Pow(..) => OpKind::Pow,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Concat(..) => OpKind::Concat,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::Gather { .. } => OpKind::Gather,
            Op::RowL2Norm(..) => OpKind::L2Norm,
            Op::Normalize { .. } => OpKind::Normalize,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode computation tape. Single writer; not shared across threads.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, Var>>,
    consumed: Cell<bool>,
    macs: Cell<u64>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    /// Gradient with respect to a recorded value; zero if it was unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.by_node[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradient of a registered parameter by key, `None` if never registered.
    pub fn param(&self, key: usize) -> Option<Tensor> {
        self.params.get(&key).map(|&v| self.wrt(v))
    }

    /// Keys of all registered parameters, sorted.
    pub fn param_keys(&self) -> Vec<usize> {
        let mut k: Vec<usize> = self.params.keys().copied().collect();
        k.sort_unstable();
        k
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            let rg = |v: &Var| nodes[v.0].requires_grad;
            match &op {
                Op::Leaf => false,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                    rg(a) || rg(b)
                }
                Op::Conv2d { x, w, .. } => rg(x) || rg(w),
                Op::Concat(parts) => parts.iter().any(rg),
                Op::AddScalar(a)
                | Op::MulScalar(a, _)
                | Op::Transpose(a)
                | Op::Sum(a)
                | Op::Broadcast(a)
                | Op::Reshape(a)
                | Op::Relu(a)
                | Op::Exp(a)
                | Op::Log(a)
                | Op::Sqrt(a)
                | Op::SqrtClamped(a)
                | Op::Pow(a, _)
                | Op::Softmax(a)
                | Op::LogSoftmax(a)
                | Op::RowL2Norm(a) => rg(a),
                Op::MaxPool { x, .. } | Op::SelectRows { x, .. } | Op::Gather { x, .. } => rg(x),
                Op::Normalize { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
            }
        };
        self.push_node(Node {
            value,
            op,
            requires_grad,
        })
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn val<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn val2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push_node(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        })
    }

    /// Records a differentiable leaf that is not a named parameter.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push_node(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        })
    }

    /// Registers parameter `key`; repeated registration returns the same var.
    pub fn param(&self, key: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.params.borrow().get(&key) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.borrow_mut().insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.val(v, Tensor::clone)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.val(v, |t| t.shape().to_vec())
    }

    /// Value of a single-element var.
    pub fn scalar(&self, v: Var) -> f64 {
        self.val(v, |t| {
            assert!(t.is_scalar(), "scalar() on shape {:?}", t.shape());
            t.item()
        })
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> OpStats {
        let mut counts = BTreeMap::new();
        for n in self.nodes.borrow().iter() {
            *counts.entry(n.op.kind()).or_insert(0) += 1;
        }
        OpStats {
            counts,
            macs: self.macs.get(),
        }
    }

    /// Errors if any entry of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.val(v, Tensor::all_finite) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    // ---- elementwise ----

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.val2(a, b, |x, y| {
            assert_eq!(x.shape(), y.shape(), "{name}: shape mismatch");
            x.zip_map(y, f)
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "add", |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "sub", |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "mul", |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "div", |x, y| x / y);
        self.push(t, Op::Div(a, b))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let t = self.val(a, |x| x.map(|v| v + c));
        self.push(t, Op::AddScalar(a))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let t = self.val(a, |x| x.map(|v| v * c));
        self.push(t, Op::MulScalar(a, c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn relu(&self, a: Var) -> Var {
        let t = self.val(a, |x| x.map(|v| if v > 0.0 { v } else { 0.0 }));
        self.push(t, Op::Relu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let t = self.val(a, |x| x.map(f64::exp));
        self.push(t, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        let t = self.val(a, |x| x.map(f64::ln));
        self.push(t, Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let t = self.val(a, |x| x.map(f64::sqrt));
        self.push(t, Op::Sqrt(a))
    }

    /// `sqrt(max(x, 0))`. The derivative is zero where `x <= 0` and uses
    /// `max(x, 1e-12)` under the root elsewhere so it stays finite near zero.
    pub fn sqrt_clamped(&self, a: Var) -> Var {
        let t = self.val(a, |x| x.map(|v| v.max(0.0).sqrt()));
        self.push(t, Op::SqrtClamped(a))
    }

    pub fn powf(&self, a: Var, p: f64) -> Var {
        let t = self.val(a, |x| x.map(|v| v.powf(p)));
        self.push(t, Op::Pow(a, p))
    }

    // ---- shape ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let t = self.val(a, |x| x.clone().reshape(shape).expect("reshape"));
        self.push(t, Op::Reshape(a))
    }

    /// Broadcasts under trailing-axis alignment (size-1 axes expand).
    pub fn broadcast(&self, a: Var, shape: &[usize]) -> Var {
        let t = self.val(a, |x| {
            assert!(
                broadcastable(x.shape(), shape),
                "cannot broadcast {:?} to {shape:?}",
                x.shape()
            );
            broadcast_to(x, shape)
        });
        self.push(t, Op::Broadcast(a))
    }

    /// Sums over `axes`, keeping them as extent-1 axes.
    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Var {
        let t = self.val(a, |x| {
            let mut target = x.shape().to_vec();
            for &ax in axes {
                target[ax] = 1;
            }
            reduce_to(x, &target)
        });
        self.push(t, Op::Sum(a))
    }

    /// Mean over `axes`, keeping them as extent-1 axes.
    pub fn mean_axes(&self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a);
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes);
        self.mul_scalar(s, 1.0 / count as f64)
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum(&self, a: Var) -> Var {
        let t = self.val(a, |x| Tensor::scalar(x.sum()));
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.val(a, Tensor::len);
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let t = self.val(a, |x| {
            assert_eq!(x.ndim(), 2, "transpose needs a matrix");
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], d).expect("transpose")
        });
        self.push(t, Op::Transpose(a))
    }

    /// Concatenates along axis 0.
    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let t = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.shape()[1..], first[1..], "concat: trailing shape mismatch");
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            let mut shape = first;
            shape[0] = rows;
            Tensor::new(shape, data).expect("concat")
        };
        self.push(t, Op::Concat(parts.to_vec()))
    }

    /// Rows `idx` along axis 0 (repeats allowed).
    pub fn select_rows(&self, a: Var, idx: &[usize]) -> Var {
        let t = self.val(a, |x| {
            assert!(idx.iter().all(|&i| i < x.shape()[0]), "select_rows: index out of range");
            assert!(!idx.is_empty(), "select_rows: empty selection");
            x.select_rows(idx)
        });
        self.push(
            t,
            Op::SelectRows {
                x: a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Flat-index gather, output shape `[idx.len()]`.
    pub fn gather(&self, a: Var, idx: &[usize]) -> Var {
        let t = self.val(a, |x| {
            Tensor::from_vec(idx.iter().map(|&i| x.data()[i]).collect())
        });
        self.push(
            t,
            Op::Gather {
                x: a,
                idx: idx.to_vec(),
            },
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let t = self.val2(a, b, |x, y| {
            assert!(x.ndim() == 2 && y.ndim() == 2, "matmul needs matrices");
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let (k2, n) = (y.shape()[0], y.shape()[1]);
            assert_eq!(k, k2, "matmul inner extents");
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, 1.0, x.data(), false, y.data(), false, 0.0, &mut c);
            self.macs.set(self.macs.get() + (m * k * n) as u64);
            Tensor::new(vec![m, n], c).expect("matmul")
        });
        self.push(t, Op::MatMul(a, b))
    }

    /// Row-wise Euclidean norm of a matrix, shape `[n, 1]`.
    pub fn row_l2_norm(&self, a: Var) -> Var {
        let t = self.val(a, |x| {
            assert_eq!(x.ndim(), 2, "row_l2_norm needs a matrix");
            let c = x.shape()[1];
            let d = x
                .data()
                .chunks(c)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect::<Vec<_>>();
            Tensor::new(vec![x.shape()[0], 1], d).expect("norm")
        });
        self.push(t, Op::RowL2Norm(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let t = self.val(a, |x| {
            let c = *x.shape().last().expect("softmax of rank-0");
            let mut d = x.data().to_vec();
            for row in d.chunks_mut(c) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            Tensor::new(x.shape().to_vec(), d).expect("softmax")
        });
        self.push(t, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Var {
        let t = self.val(a, |x| {
            let c = *x.shape().last().expect("log_softmax of rank-0");
            let mut d = x.data().to_vec();
            for row in d.chunks_mut(c) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::new(x.shape().to_vec(), d).expect("log_softmax")
        });
        self.push(t, Op::LogSoftmax(a))
    }

    // ---- convolutional ----

    /// 2-D convolution, `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (t, geom) = self.val2(x, w, |xv, wv| {
            let (xs, ws) = (xv.shape(), wv.shape());
            assert!(xs.len() == 4 && ws.len() == 4, "conv2d needs rank-4 operands");
            assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
            assert_eq!(ws[2], ws[3], "conv2d kernels are square");
            assert!(stride >= 1, "conv2d stride");
            let geom = ConvGeom {
                batch: xs[0],
                in_ch: xs[1],
                out_ch: ws[0],
                h: xs[2],
                w: xs[3],
                k: ws[2],
                stride,
                pad,
            };
            assert!(xs[2] + 2 * pad >= ws[2] && xs[3] + 2 * pad >= ws[2], "conv2d kernel larger than input");
            let out = kernels::conv2d_forward(&geom, xv.data(), wv.data());
            let t = Tensor::new(vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()], out)
                .expect("conv2d");
            (t, geom)
        });
        self.macs.set(self.macs.get() + geom.macs());
        self.push(t, Op::Conv2d { x, w, geom })
    }

    /// Non-overlapping `k x k` max pooling on `[N, C, H, W]`.
    pub fn max_pool(&self, x: Var, k: usize) -> Var {
        let (t, arg) = self.val(x, |xv| {
            let s = xv.shape();
            assert_eq!(s.len(), 4, "max_pool needs rank 4");
            assert!(s[2] >= k && s[3] >= k && k >= 1, "max_pool window");
            let (v, arg) = kernels::max_pool_forward(xv.data(), s[0] * s[1], s[2], s[3], k);
            (
                Tensor::new(vec![s[0], s[1], s[2] / k, s[3] / k], v).expect("pool"),
                arg,
            )
        });
        self.push(t, Op::MaxPool { x, arg })
    }

    /// Per-channel normalization of `x: [N, C, H, W]` followed by the affine
    /// map `gamma * xhat + beta` (`gamma`, `beta`: `[C]`), as one fused op.
    ///
    /// For [`NormStats::Batch`] also returns the batch mean and biased
    /// variance per channel.
    pub fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let nodes = self.nodes.borrow();
        let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
        let s = xv.shape();
        assert_eq!(s.len(), 4, "normalize needs rank 4");
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        assert!(gv.len() == c && bv.len() == c, "normalize: affine length");
        let data = xv.data();
        let (group, mean, var) = match stats {
            NormStats::Fixed { mean, var } => {
                assert!(mean.len() == c && var.len() == c, "normalize: statistics length");
                (NormGroup::Fixed, mean.to_vec(), var.to_vec())
            }
            NormStats::Batch => {
                let m = (n * hw) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let plane = |ni: usize| &data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let mu = (0..n).map(|ni| plane(ni).iter().sum::<f64>()).sum::<f64>() / m;
                    let v = (0..n)
                        .map(|ni| plane(ni).iter().map(|x| (x - mu) * (x - mu)).sum::<f64>())
                        .sum::<f64>()
                        / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                (NormGroup::Channel, mean, var)
            }
            NormStats::Instance => {
                let m = hw as f64;
                let (mean, var): (Vec<f64>, Vec<f64>) = data
                    .chunks(hw)
                    .map(|p| {
                        let mu = p.iter().sum::<f64>() / m;
                        (mu, p.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m)
                    })
                    .unzip();
                (NormGroup::SampleChannel, mean, var)
            }
        };
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut y = vec![0.0; data.len()];
        for (pi, (xp, (hp, yp))) in data
            .chunks(hw)
            .zip(xhat.chunks_mut(hw).zip(y.chunks_mut(hw)))
            .enumerate()
        {
            let ci = pi % c;
            let gi = if group == NormGroup::SampleChannel { pi } else { ci };
            let (mu, iv, ga, be) = (mean[gi], inv[gi], gv.data()[ci], bv.data()[ci]);
            for ((x, h), o) in xp.iter().zip(hp.iter_mut()).zip(yp.iter_mut()) {
                *h = (x - mu) * iv;
                *o = *h * ga + be;
            }
        }
        let shape = s.to_vec();
        drop(nodes);
        let out = self.push(
            Tensor::new(shape.clone(), y).expect("normalize"),
            Op::Normalize {
                x,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat).expect("normalize"),
                inv,
                group,
            },
        );
        let batch = (group == NormGroup::Channel).then_some((mean, var));
        (out, batch)
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let s = self.shape(x);
        let m = self.mean_axes(x, &[2, 3]);
        self.reshape(m, &[s[0], s[1]])
    }

    // ---- backward ----

    /// Replays the tape in reverse from a scalar `loss`.
    ///
    /// Every node is visited once. A tape supports a single backward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if !gy.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {:?}", node.op.kind())));
            }
            backprop(&nodes, node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        drop(nodes);
        let nodes = self.nodes.borrow();
        Ok(Gradients {
            by_node: grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.borrow().clone(),
        })
    }
}

fn accum(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: &Var| &nodes[v.0].value;
    let rg = |v: &Var| nodes[v.0].requires_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(nodes, grads, *a, gy.clone());
            accum(nodes, grads, *b, gy.clone());
        }
        Op::Sub(a, b) => {
            accum(nodes, grads, *a, gy.clone());
            if rg(b) {
                accum(nodes, grads, *b, gy.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if rg(a) {
                accum(nodes, grads, *a, gy.zip_map(val(b), |g, y| g * y));
            }
            if rg(b) {
                accum(nodes, grads, *b, gy.zip_map(val(a), |g, x| g * x));
            }
        }
        Op::Div(a, b) => {
            let bv = val(b);
            if rg(a) {
                accum(nodes, grads, *a, gy.zip_map(bv, |g, d| g / d));
            }
            if rg(b) {
                // d(a/b)/db = -y / b
                let t = gy.zip_map(y, |g, q| g * q).zip_map(bv, |gq, d| -gq / d);
                accum(nodes, grads, *b, t);
            }
        }
        Op::AddScalar(a) => accum(nodes, grads, *a, gy.clone()),
        Op::MulScalar(a, c) => accum(nodes, grads, *a, gy.map(|g| g * c)),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if rg(a) {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, 1.0, gy.data(), false, bv.data(), true, 0.0, &mut da);
                accum(nodes, grads, *a, Tensor::new(vec![m, k], da).expect("matmul grad"));
            }
            if rg(b) {
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, 1.0, av.data(), true, gy.data(), false, 0.0, &mut db);
                accum(nodes, grads, *b, Tensor::new(vec![k, n], db).expect("matmul grad"));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (gy.shape()[0], gy.shape()[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = gy.data()[i * c + j];
                }
            }
            accum(nodes, grads, *a, Tensor::new(vec![c, r], d).expect("transpose grad"));
        }
        Op::Conv2d { x, w, geom } => {
            let (dx, dw) = kernels::conv2d_backward(
                geom,
                val(x).data(),
                val(w).data(),
                gy.data(),
                rg(x),
                rg(w),
            );
            if let Some(dx) = dx {
                accum(nodes, grads, *x, Tensor::new(val(x).shape().to_vec(), dx).expect("conv dx"));
            }
            if let Some(dw) = dw {
                accum(nodes, grads, *w, Tensor::new(val(w).shape().to_vec(), dw).expect("conv dw"));
            }
        }
        Op::MaxPool { x, arg } => {
            let mut d = Tensor::zeros(val(x).shape());
            for (g, &i) in gy.data().iter().zip(arg) {
                d.data_mut()[i] += g;
            }
            accum(nodes, grads, *x, d);
        }
        Op::Sum(a) => {
            let shape = val(a).shape();
            let g = if gy.shape().len() == shape.len() {
                broadcast_to(gy, shape)
            } else {
                Tensor::full(shape, gy.item())
            };
            accum(nodes, grads, *a, g);
        }
        Op::Broadcast(a) => {
            let from = val(a).shape();
            let padded = pad_shape(from, gy.ndim());
            let r = reduce_to(gy, &padded).reshape(from).expect("broadcast grad");
            accum(nodes, grads, *a, r);
        }
        Op::Reshape(a) => {
            let g = gy.clone().reshape(val(a).shape()).expect("reshape grad");
            accum(nodes, grads, *a, g);
        }
        Op::Relu(a) => {
            accum(nodes, grads, *a, gy.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 }));
        }
        Op::Exp(a) => accum(nodes, grads, *a, gy.zip_map(y, |g, e| g * e)),
        Op::Log(a) => accum(nodes, grads, *a, gy.zip_map(val(a), |g, x| g / x)),
        Op::Sqrt(a) => accum(nodes, grads, *a, gy.zip_map(y, |g, s| g * 0.5 / s)),
        Op::SqrtClamped(a) => {
            let d = gy.zip_map(val(a), |g, x| {
                if x <= 0.0 {
                    0.0
                } else {
                    g * 0.5 / x.max(1e-12).sqrt()
                }
            });
            accum(nodes, grads, *a, d);
        }
        Op::Pow(a, p) => {
            let d = gy.zip_map(val(a), |g, x| g * p * x.powf(p - 1.0));
            accum(nodes, grads, *a, d);
        }
        Op::Softmax(a) => {
            let c = *y.shape().last().unwrap();
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(gy.data().chunks(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(s, g)| s * g).sum();
                for ((o, s), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = s * (g - dot);
                }
            }
            accum(nodes, grads, *a, Tensor::new(y.shape().to_vec(), d).expect("softmax grad"));
        }
        Op::LogSoftmax(a) => {
            let c = *y.shape().last().unwrap();
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(gy.data().chunks(c)) {
                let gs: f64 = gr.iter().sum();
                for ((o, l), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = g - l.exp() * gs;
                }
            }
            accum(nodes, grads, *a, Tensor::new(y.shape().to_vec(), d).expect("log_softmax grad"));
        }
        Op::Concat(parts) => {
            let row: usize = gy.shape()[1..].iter().product();
            let mut off = 0;
            for p in parts {
                let pv = val(p);
                let n = pv.len();
                if rg(p) {
                    let g = Tensor::new(pv.shape().to_vec(), gy.data()[off..off + n].to_vec())
                        .expect("concat grad");
                    accum(nodes, grads, *p, g);
                }
                off += n;
                debug_assert_eq!(n % row, 0);
            }
        }
        Op::SelectRows { x, idx } => {
            let xv = val(x);
            let row: usize = xv.shape()[1..].iter().product();
            let mut d = Tensor::zeros(xv.shape());
            for (k, &i) in idx.iter().enumerate() {
                let src = &gy.data()[k * row..(k + 1) * row];
                for (o, g) in d.data_mut()[i * row..(i + 1) * row].iter_mut().zip(src) {
                    *o += g;
                }
            }
            accum(nodes, grads, *x, d);
        }
        Op::Gather { x, idx } => {
            let mut d = Tensor::zeros(val(x).shape());
            for (g, &i) in gy.data().iter().zip(idx) {
                d.data_mut()[i] += g;
            }
            accum(nodes, grads, *x, d);
        }
        Op::Normalize {
            x,
            gamma,
            beta,
            xhat,
            inv,
            group,
        } => {
            let s = xhat.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let (gd, hd) = (gy.data(), xhat.data());
            // per-plane sums of gy and gy * xhat
            let mut sum_g = vec![0.0; n * c];
            let mut sum_gh = vec![0.0; n * c];
            for (pi, (gp, hp)) in gd.chunks(hw).zip(hd.chunks(hw)).enumerate() {
                sum_g[pi] = gp.iter().sum();
                sum_gh[pi] = gp.iter().zip(hp).map(|(g, h)| g * h).sum();
            }
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for pi in 0..n * c {
                dgamma[pi % c] += sum_gh[pi];
                dbeta[pi % c] += sum_g[pi];
            }
            if rg(gamma) {
                accum(nodes, grads, *gamma, Tensor::from_vec(dgamma.clone()));
            }
            if rg(beta) {
                accum(nodes, grads, *beta, Tensor::from_vec(dbeta.clone()));
            }
            if rg(x) {
                let gam = val(gamma).data();
                let mut dx = vec![0.0; gd.len()];
                for (pi, ((gp, hp), dp)) in gd.chunks(hw).zip(hd.chunks(hw)).zip(dx.chunks_mut(hw)).enumerate() {
                    let ci = pi % c;
                    let (m, sg, sgh, iv) = match group {
                        NormGroup::Fixed => (1.0, 0.0, 0.0, inv[ci]),
                        NormGroup::Channel => ((n * hw) as f64, dbeta[ci], dgamma[ci], inv[ci]),
                        NormGroup::SampleChannel => (hw as f64, sum_g[pi], sum_gh[pi], inv[pi]),
                    };
                    let k = gam[ci] * iv / m;
                    for ((g, h), d) in gp.iter().zip(hp).zip(dp.iter_mut()) {
                        *d = k * (m * g - sg - h * sgh);
                    }
                }
                accum(nodes, grads, *x, Tensor::new(s.to_vec(), dx).expect("normalize grad"));
            }
        }
        Op::RowL2Norm(a) => {
            let xv = val(a);
            let c = xv.shape()[1];
            let mut d = vec![0.0; xv.len()];
            for (r, (dr, xr)) in d.chunks_mut(c).zip(xv.data().chunks(c)).enumerate() {
                let nrm = y.data()[r];
                let g = gy.data()[r];
                if nrm > 0.0 {
                    for (o, x) in dr.iter_mut().zip(xr) {
                        *o = g * x / nrm;
                    }
                }
            }
            accum(nodes, grads, *a, Tensor::new(xv.shape().to_vec(), d).expect("norm grad"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (1.7 * i as f64 + phase).sin() + 0.1 * i as f64).collect()
    }

    fn normalize_gradcheck(stats: fn() -> NormStats<'static>) -> f64 {
        let (n, c, hw) = (3, 2, 4);
        let x = Tensor::new(vec![n, c, 2, 2], wave(n * c * hw, 0.3)).unwrap();
        let gamma = Tensor::new(vec![c], vec![1.3, -0.7]).unwrap();
        let beta = Tensor::new(vec![c], vec![0.2, 0.5]).unwrap();
        let weights = Tensor::new(vec![n, c, 2, 2], wave(n * c * hw, 2.1)).unwrap();
        crate::tensor::finite_diff_check(&[x, gamma, beta], 1e-5, |g, v| {
            let (y, _) = g.normalize(v[0], v[1], v[2], stats(), 1e-5);
            let w = g.constant(weights.clone());
            Ok(g.sum(g.mul(y, w)))
        })
        .unwrap()
    }

    #[test]
    fn normalize_gradients_match_finite_differences() {
        static MEAN: [f64; 2] = [0.1, -0.4];
        static VAR: [f64; 2] = [0.8, 1.9];
        assert!(normalize_gradcheck(|| NormStats::Batch) < 1e-6);
        assert!(normalize_gradcheck(|| NormStats::Instance) < 1e-6);
        assert!(normalize_gradcheck(|| NormStats::Fixed { mean: &MEAN, var: &VAR }) < 1e-6);
    }

    #[test]
    fn batch_normalize_reports_biased_statistics() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let one = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let zero = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let (y, stats) = g.normalize(x, one, zero, NormStats::Batch, 0.0);
        let (m, v) = stats.unwrap();
        assert_eq!(m, vec![3.0]);
        assert_eq!(v, vec![3.5]);
        let total: f64 = g.value(y).data().iter().sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.param(0, &Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.param(0).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = Graph::new();
        let x = g.param(0, &Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(2.5));
        let y = g.mul_scalar(c, 4.0);
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.param(0).unwrap().item(), 0.0);
        assert_eq!(gr.wrt(x).item(), 0.0);
    }

    #[test]
    fn second_backward_rejected() {
        let g = Graph::new();
        let x = g.param(0, &Tensor::scalar(1.0));
        let y = g.exp(x);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.param(0, &Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_loss_rejected() {
        let g = Graph::new();
        let x = g.param(0, &Tensor::scalar(-1.0));
        let y = g.log(x);
        assert!(matches!(g.backward(y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn infinite_gradient_rejected() {
        let g = Graph::new();
        let x = g.param(0, &Tensor::scalar(0.0));
        let y = g.sqrt(x);
        assert!(matches!(g.backward(y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn param_registration_is_idempotent() {
        let g = Graph::new();
        let t = Tensor::scalar(2.0);
        let a = g.param(7, &t);
        let b = g.param(7, &t);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.param(7).unwrap().item(), 4.0);
    }

    #[test]
    fn sqrt_clamped_is_exact_zero_and_finite() {
        let g = Graph::new();
        let x = g.param(0, &Tensor::scalar(-1e-18));
        let y = g.sqrt_clamped(x);
        assert_eq!(g.scalar(y), 0.0);
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.param(0).unwrap().item(), 0.0);
    }

    #[test]
    fn stats_count_macs() {
        let g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 4]));
        g.matmul(a, b);
        let s = g.stats();
        assert_eq!(s.macs, 24);
        assert_eq!(s.count(OpKind::MatMul), 1);
        assert_eq!(s.count(OpKind::Leaf), 2);
    }
}
