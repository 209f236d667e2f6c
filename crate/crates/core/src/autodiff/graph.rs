//! Static computation graphs and their primitive operations.

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::{narrow, widen, Scalar};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Primitive operations. Inputs carry a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Named input; `sample_shape` excludes the batch axis.
    Input {
        name: String,
        sample_shape: Vec<usize>,
    },
    /// Named parameter bound from a [`ParamStore`](super::ParamStore).
    Param {
        name: String,
        shape: Vec<usize>,
    },
    /// `[m,k] · [k,n]`, or `[m,k] · [n,k]ᵀ` when `transpose_b`.
    MatMul {
        transpose_b: bool,
    },
    /// Adds a `[C]` bias along axis 1.
    BiasAdd,
    /// `[B,Cin,H,W] ⊛ [Cout,Cin,kh,kw]`.
    Conv2d {
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    /// `[B,C,H,W] → [B,C]`
    GlobalAvgPool,
    /// `[B,...] → [B,prod(...)]`
    Flatten,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Abs,
    Square,
    Softplus,
    /// Smooth L1 with transition at 1.
    SmoothL1,
    Scale(f64),
    AddScalar(f64),
    Add,
    Sub,
    Mul,
    /// Sum of all elements to a scalar.
    Sum,
    /// Mean of all elements to a scalar.
    Mean,
    /// Sum over the last axis.
    SumLast,
    /// Stable `ln Σ exp` over the last axis.
    LogSumExp,
}

impl Op {
    pub fn arity(&self) -> usize {
        match self {
            Op::Input { .. } | Op::Param { .. } => 0,
            Op::MatMul { .. } | Op::BiasAdd | Op::Conv2d { .. } | Op::Add | Op::Sub | Op::Mul => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::MatMul { .. } => "matmul",
            Op::BiasAdd => "bias_add",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Flatten => "flatten",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Softplus => "softplus",
            Op::SmoothL1 => "smooth_l1",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumLast => "sum_last",
            Op::LogSumExp => "log_sum_exp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// An immutable DAG of primitive operations in topological order.
///
/// Nodes can only reference earlier nodes, so insertion order is a valid
/// topological order and the graph is acyclic by construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Input { name: nm, .. } if nm == name))
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Param { name: nm, .. } if nm == name))
    }

    /// `(name, node)` for every parameter node, in graph order.
    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param { name, .. } => Some((name.as_str(), i)),
                _ => None,
            })
    }
}

/// Appends nodes to a [`Graph`]; every method returns the new node's id.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        let id = self.graph.nodes.len();
        assert_eq!(op.arity(), inputs.len(), "{} arity", op.name());
        for &i in inputs {
            assert!(i < id, "node {id} references later node {i}");
        }
        self.graph.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
        });
        id
    }

    pub fn input(&mut self, name: &str, sample_shape: &[usize]) -> NodeId {
        self.push(
            Op::Input {
                name: name.to_string(),
                sample_shape: sample_shape.to_vec(),
            },
            &[],
        )
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(
            Op::Param {
                name: name.to_string(),
                shape: shape.to_vec(),
            },
            &[],
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { transpose_b: false }, &[a, b])
    }

    /// `a · bᵀ`, the usual dense layer with `b` stored as `[out, in]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { transpose_b: true }, &[a, b])
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::BiasAdd, &[x, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: Padding) -> NodeId {
        self.push(Op::Conv2d { stride, padding }, &[x, w])
    }

    pub fn max_pool2d(&mut self, x: NodeId, size: usize, stride: usize) -> NodeId {
        self.push(Op::MaxPool2d { size, stride }, &[x])
    }

    pub fn unary(&mut self, op: Op, x: NodeId) -> NodeId {
        self.push(op, &[x])
    }

    pub fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> NodeId {
        self.push(op, &[a, b])
    }

    pub fn finish(self) -> Graph {
        self.graph
    }
}

fn conv_geom(
    node: NodeId,
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: Padding,
) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::shape(
            node,
            format!("conv2d expects 4-d operands, got {x:?} and {w:?}"),
        ));
    }
    if x[1] != w[1] {
        return Err(Error::shape(
            node,
            format!(
                "conv2d input has {} channels, kernel expects {}",
                x[1], w[1]
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(node, "conv2d stride must be >= 1"));
    }
    let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
    let (out_h, out_w, pad_top, pad_left) = match pad {
        Padding::Valid => {
            if h < kh || wd < kw {
                return Err(Error::shape(
                    node,
                    format!("kernel {kh}x{kw} larger than input {h}x{wd}"),
                ));
            }
            ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
        }
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = wd.div_ceil(stride);
            let ph = ((oh - 1) * stride + kh).saturating_sub(h);
            let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
            (oh, ow, ph / 2, pw / 2)
        }
    };
    Ok(ConvGeom {
        in_ch: x[1],
        in_h: h,
        in_w: wd,
        k_h: kh,
        k_w: kw,
        stride,
        pad_top,
        pad_left,
        out_h,
        out_w,
    })
}

fn pool_out(node: NodeId, x: &[usize], size: usize, stride: usize) -> Result<(usize, usize)> {
    if x.len() != 4 {
        return Err(Error::shape(
            node,
            format!("max_pool2d expects 4-d input, got {x:?}"),
        ));
    }
    if size == 0 || stride == 0 || x[2] < size || x[3] < size {
        return Err(Error::shape(
            node,
            format!("pool window {size} does not fit {x:?}"),
        ));
    }
    Ok(((x[2] - size) / stride + 1, (x[3] - size) / stride + 1))
}

fn same_shape(node: NodeId, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(
            node,
            format!("operand shapes {a:?} and {b:?} differ"),
        ));
    }
    Ok(())
}

fn unary_map<T: Scalar>(x: &Tensor<T>, f: impl Fn(f64) -> f64) -> Tensor<T> {
    Tensor::new(
        x.shape(),
        x.data().iter().map(|v| T::of(f(v.as_f64()))).collect(),
    )
    .expect("same shape")
}

/// Forward evaluation of one non-leaf node.
pub(crate) fn eval<T: Scalar>(node: NodeId, op: &Op, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let out = match op {
        Op::Input { .. } | Op::Param { .. } => unreachable!("leaves are bound, not evaluated"),
        Op::MatMul { transpose_b } => {
            let (a, b) = (args[0], args[1]);
            if a.rank() != 2 || b.rank() != 2 {
                return Err(Error::shape(
                    node,
                    format!(
                        "matmul expects matrices, got {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    ),
                ));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (bk, n) = if *transpose_b {
                (b.shape()[1], b.shape()[0])
            } else {
                (b.shape()[0], b.shape()[1])
            };
            if k != bk {
                return Err(Error::shape(node, format!("matmul inner dims {k} vs {bk}")));
            }
            let (aw, bw) = (widen(a.data()), widen(b.data()));
            let mut c = vec![0.0; m * n];
            if *transpose_b {
                kernels::gemm_nt(m, k, n, &aw, &bw, &mut c);
            } else {
                kernels::gemm_nn(m, k, n, &aw, &bw, &mut c);
            }
            Tensor::new([m, n], narrow(c))?
        }
        Op::BiasAdd => {
            let (x, b) = (args[0], args[1]);
            if x.rank() < 2 || b.rank() != 1 || b.len() != x.shape()[1] {
                return Err(Error::shape(
                    node,
                    format!("bias {:?} does not match input {:?}", b.shape(), x.shape()),
                ));
            }
            let c = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let bias = b.data();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| T::of(v.as_f64() + bias[(i / inner) % c].as_f64()))
                .collect();
            Tensor::new(x.shape(), data)?
        }
        Op::Conv2d { stride, padding } => {
            let (x, w) = (args[0], args[1]);
            let g = conv_geom(node, x.shape(), w.shape(), *stride, *padding)?;
            let (batch, out_ch) = (x.shape()[0], w.shape()[0]);
            let (k, p) = (g.patch_len(), g.positions());
            let xw = widen(x.data());
            let ww = widen(w.data());
            let per_in = g.in_ch * g.in_h * g.in_w;
            let mut cols = vec![0.0; k * p];
            let mut out = vec![0.0; batch * out_ch * p];
            for b in 0..batch {
                im2col(&g, &xw[b * per_in..(b + 1) * per_in], &mut cols);
                kernels::gemm_nn(
                    out_ch,
                    k,
                    p,
                    &ww,
                    &cols,
                    &mut out[b * out_ch * p..(b + 1) * out_ch * p],
                );
            }
            Tensor::new([batch, out_ch, g.out_h, g.out_w], narrow(out))?
        }
        Op::MaxPool2d { size, stride } => {
            let x = args[0];
            let (oh, ow) = pool_out(node, x.shape(), *size, *stride)?;
            let s = x.shape();
            let (h, w) = (s[2], s[3]);
            let planes = s[0] * s[1];
            let xw = widen(x.data());
            let mut out = Vec::with_capacity(planes * oh * ow);
            for pl in 0..planes {
                let plane = &xw[pl * h * w..(pl + 1) * h * w];
                for i in kernels::maxpool_argmax(plane, h, w, *size, *stride, oh, ow) {
                    out.push(T::of(plane[i]));
                }
            }
            Tensor::new([s[0], s[1], oh, ow], out)?
        }
        Op::GlobalAvgPool => {
            let x = args[0];
            if x.rank() != 4 {
                return Err(Error::shape(
                    node,
                    format!("global_avg_pool expects 4-d input, got {:?}", x.shape()),
                ));
            }
            let s = x.shape();
            let hw = s[2] * s[3];
            let data = x
                .data()
                .chunks(hw)
                .map(|c| T::of(c.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
                .collect();
            Tensor::new([s[0], s[1]], data)?
        }
        Op::Flatten => {
            let x = args[0];
            if x.rank() < 1 {
                return Err(Error::shape(node, "flatten needs a batch axis"));
            }
            let b = x.shape()[0];
            let rest = x.len() / b.max(1);
            x.clone().reshape([b, rest])?
        }
        Op::Relu => unary_map(args[0], |v| v.max(0.0)),
        Op::Sigmoid => unary_map(args[0], kernels::sigmoid),
        Op::Exp => unary_map(args[0], f64::exp),
        Op::Ln => unary_map(args[0], f64::ln),
        Op::Abs => unary_map(args[0], f64::abs),
        Op::Square => unary_map(args[0], |v| v * v),
        Op::Softplus => unary_map(args[0], kernels::softplus),
        Op::SmoothL1 => unary_map(args[0], kernels::smooth_l1),
        Op::Scale(c) => unary_map(args[0], |v| v * c),
        Op::AddScalar(c) => unary_map(args[0], |v| v + c),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (args[0], args[1]);
            same_shape(node, a.shape(), b.shape())?;
            let f = |x: f64, y: f64| match op {
                Op::Add => x + y,
                Op::Sub => x - y,
                _ => x * y,
            };
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| T::of(f(x.as_f64(), y.as_f64())))
                .collect();
            Tensor::new(a.shape(), data)?
        }
        Op::Sum | Op::Mean => {
            let x = args[0];
            let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
            let v = if matches!(op, Op::Mean) {
                s / x.len().max(1) as f64
            } else {
                s
            };
            Tensor::scalar(T::of(v))
        }
        Op::SumLast | Op::LogSumExp => {
            let x = args[0];
            let Some((&last, lead)) = x.shape().split_last() else {
                return Err(Error::shape(
                    node,
                    "reduction over the last axis of a scalar",
                ));
            };
            if last == 0 {
                return Err(Error::shape(node, "reduction over an empty axis"));
            }
            let data = x
                .data()
                .chunks(last)
                .map(|row| {
                    let r = widen(row);
                    T::of(if matches!(op, Op::SumLast) {
                        r.iter().sum()
                    } else {
                        log_sum_exp(&r)
                    })
                })
                .collect();
            Tensor::new(lead, data)?
        }
    };
    if !out.is_finite() {
        return Err(Error::NonFinite(node));
    }
    Ok(out)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    kernels::im2col(g, x, cols)
}

/// Vector-Jacobian product of `op` for each input flagged in `want`.
pub(crate) fn vjp<T: Scalar>(
    node: NodeId,
    op: &Op,
    args: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &[f64],
    want: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut res: Vec<Option<Vec<f64>>> = vec![None; args.len()];
    let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        // f(input, output) -> local derivative
        args[0]
            .data()
            .iter()
            .zip(out.data())
            .zip(g)
            .map(|((x, y), gv)| gv * f(x.as_f64(), y.as_f64()))
            .collect()
    };
    match op {
        Op::Input { .. } | Op::Param { .. } => {}
        Op::MatMul { transpose_b } => {
            let (a, b) = (args[0], args[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = out.shape()[1];
            let aw = widen(a.data());
            let bw = widen(b.data());
            if want[0] {
                let mut da = vec![0.0; m * k];
                if *transpose_b {
                    // b: [n,k]; dA = dC · B
                    kernels::gemm_nn(m, n, k, g, &bw, &mut da);
                } else {
                    // b: [k,n]; dA = dC · Bᵀ
                    kernels::gemm_nt(m, n, k, g, &bw, &mut da);
                }
                res[0] = Some(da);
            }
            if want[1] {
                if *transpose_b {
                    // dB[n,k] = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    kernels::gemm_tn(n, m, k, g, &aw, &mut db);
                    res[1] = Some(db);
                } else {
                    // dB[k,n] = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(k, m, n, &aw, g, &mut db);
                    res[1] = Some(db);
                }
            }
        }
        Op::BiasAdd => {
            let x = args[0];
            if want[0] {
                res[0] = Some(g.to_vec());
            }
            if want[1] {
                let c = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                let mut db = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    db[(i / inner) % c] += gv;
                }
                res[1] = Some(db);
            }
        }
        Op::Conv2d { stride, padding } => {
            let (x, w) = (args[0], args[1]);
            let geom = conv_geom(node, x.shape(), w.shape(), *stride, *padding)?;
            let (batch, out_ch) = (x.shape()[0], w.shape()[0]);
            let (k, p) = (geom.patch_len(), geom.positions());
            let per_in = geom.in_ch * geom.in_h * geom.in_w;
            let xw = widen(x.data());
            let ww = widen(w.data());
            let mut cols = vec![0.0; k * p];
            let mut dcols = vec![0.0; k * p];
            let mut dx = if want[0] {
                Some(vec![0.0; x.len()])
            } else {
                None
            };
            let mut dw = if want[1] {
                Some(vec![0.0; w.len()])
            } else {
                None
            };
            for b in 0..batch {
                let gb = &g[b * out_ch * p..(b + 1) * out_ch * p];
                if let Some(dw) = dw.as_mut() {
                    im2col(&geom, &xw[b * per_in..(b + 1) * per_in], &mut cols);
                    kernels::gemm_nt(out_ch, p, k, gb, &cols, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    kernels::gemm_tn(k, out_ch, p, &ww, gb, &mut dcols);
                    kernels::col2im(&geom, &dcols, &mut dx[b * per_in..(b + 1) * per_in]);
                }
            }
            res[0] = dx;
            res[1] = dw;
        }
        Op::MaxPool2d { size, stride } => {
            let x = args[0];
            let s = x.shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            let xw = widen(x.data());
            let mut dx = vec![0.0; x.len()];
            for pl in 0..s[0] * s[1] {
                let plane = &xw[pl * h * w..(pl + 1) * h * w];
                let idx = kernels::maxpool_argmax(plane, h, w, *size, *stride, oh, ow);
                for (o, i) in idx.into_iter().enumerate() {
                    dx[pl * h * w + i] += g[pl * oh * ow + o];
                }
            }
            res[0] = Some(dx);
        }
        Op::GlobalAvgPool => {
            let s = args[0].shape();
            let hw = s[2] * s[3];
            let mut dx = vec![0.0; args[0].len()];
            for (pl, gv) in g.iter().enumerate() {
                let v = gv / hw as f64;
                dx[pl * hw..(pl + 1) * hw].iter_mut().for_each(|d| *d = v);
            }
            res[0] = Some(dx);
        }
        Op::Flatten => res[0] = Some(g.to_vec()),
        Op::Relu => res[0] = Some(elementwise(&|x, _| if x > 0.0 { 1.0 } else { 0.0 })),
        Op::Sigmoid => res[0] = Some(elementwise(&|_, y| y * (1.0 - y))),
        Op::Exp => res[0] = Some(elementwise(&|_, y| y)),
        Op::Ln => res[0] = Some(elementwise(&|x, _| 1.0 / x)),
        Op::Abs => {
            res[0] = Some(elementwise(&|x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }))
        }
        Op::Square => res[0] = Some(elementwise(&|x, _| 2.0 * x)),
        Op::Softplus => res[0] = Some(elementwise(&|x, _| kernels::sigmoid(x))),
        Op::SmoothL1 => res[0] = Some(elementwise(&|x, _| kernels::smooth_l1_grad(x))),
        Op::Scale(c) => res[0] = Some(g.iter().map(|v| v * c).collect()),
        Op::AddScalar(_) => res[0] = Some(g.to_vec()),
        Op::Add => {
            res[0] = want[0].then(|| g.to_vec());
            res[1] = want[1].then(|| g.to_vec());
        }
        Op::Sub => {
            res[0] = want[0].then(|| g.to_vec());
            res[1] = want[1].then(|| g.iter().map(|v| -v).collect());
        }
        Op::Mul => {
            let (a, b) = (args[0], args[1]);
            if want[0] {
                res[0] = Some(
                    b.data()
                        .iter()
                        .zip(g)
                        .map(|(bv, gv)| bv.as_f64() * gv)
                        .collect(),
                );
            }
            if want[1] {
                res[1] = Some(
                    a.data()
                        .iter()
                        .zip(g)
                        .map(|(av, gv)| av.as_f64() * gv)
                        .collect(),
                );
            }
        }
        Op::Sum => res[0] = Some(vec![g[0]; args[0].len()]),
        Op::Mean => {
            let n = args[0].len().max(1) as f64;
            res[0] = Some(vec![g[0] / n; args[0].len()]);
        }
        Op::SumLast => {
            let last = *args[0].shape().last().unwrap_or(&1);
            res[0] = Some((0..args[0].len()).map(|i| g[i / last]).collect());
        }
        Op::LogSumExp => {
            let x = args[0];
            let last = *x.shape().last().unwrap_or(&1);
            let mut dx = Vec::with_capacity(x.len());
            for (r, row) in x.data().chunks(last).enumerate() {
                let lse = out.data()[r].as_f64();
                for v in row {
                    dx.push(g[r] * (v.as_f64() - lse).exp());
                }
            }
            res[0] = Some(dx);
        }
    }
    Ok(res)
}
