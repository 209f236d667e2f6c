//! Grad-CAM and contrastive Grad-CAM at the last convolution layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Op, Pass};
use crate::contrast::{ContrastTarget, LossKind};
use crate::error::{Error, Result};
use crate::nn::{NetGraph, Network};
use crate::scalar::{argmax, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamMode {
    /// "Why P?"
    GradCam,
    /// "Why P, rather than Q?"
    Contrastive,
    /// "Why not P with full confidence?" (Q = P)
    SelfContrast,
}

/// Scalar backpropagated for a contrastive map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ContrastLoss {
    /// `−y_Q + Σ_j e^{y_j}`
    Exponential,
    /// Mean squared error against `δ^M_Q`.
    MseM(f64),
}

/// Nonnegative heatmap at the spatial size of the last conv activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMap {
    pub height: usize,
    pub width: usize,
    /// `Σ_k α_k A^k` before the ReLU.
    pub raw: Vec<f64>,
    /// ReLU of `raw`, max-normalized to `[0, 1]` unless identically zero.
    pub values: Vec<f64>,
    /// Channel importance scores `α_k`.
    pub weights: Vec<f64>,
    pub mode: CamMode,
    pub p: usize,
    pub q: usize,
}

impl ExplanationMap {
    /// Build from channel weights and activations `[K, H, W]`.
    pub fn from_parts(
        weights: Vec<f64>,
        activations: &[f64],
        height: usize,
        width: usize,
        mode: CamMode,
        p: usize,
        q: usize,
    ) -> Self {
        let hw = height * width;
        let mut raw = vec![0.0; hw];
        for (k, &a) in weights.iter().enumerate() {
            for (r, v) in raw.iter_mut().zip(&activations[k * hw..(k + 1) * hw]) {
                *r += a * v;
            }
        }
        let mut values: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
        let max = values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        }
        ExplanationMap {
            height,
            width,
            raw,
            values,
            weights,
            mode,
            p,
            q,
        }
    }

    /// ReLU of the weighted sum, before normalization.
    pub fn unnormalized(&self) -> Vec<f64> {
        self.raw.iter().map(|v| v.max(0.0)).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

fn last_conv(g: &NetGraph) -> Result<NodeId> {
    g.nodes.last_conv.ok_or(Error::NoConvLayer)
}

/// Run one forward and one backward of `loss` and pool its gradient at the
/// last conv activation.
fn map_from_graph<T: Scalar>(
    net: &Network<T>,
    g: &NetGraph,
    x: &Tensor<T>,
    extra: Vec<(&str, Tensor<T>)>,
    mode_for: impl FnOnce(usize) -> (CamMode, usize, usize),
) -> Result<ExplanationMap> {
    let conv = last_conv(g)?;
    let x = net.batched(x)?;
    if x.shape()[0] != 1 {
        return Err(Error::invalid("explanations take a single sample"));
    }
    let mut pass = Pass::new(&g.graph, net.params())?;
    let mut inputs = vec![("x", x)];
    inputs.extend(extra);
    pass.forward(inputs)?;
    let p = argmax(pass.value(g.nodes.logits)?.data());
    let grads = pass.backward(g.loss.expect("loss tail"), &[conv])?;
    let act = pass.value(conv)?;
    let s = act.shape();
    let (k, h, w) = (s[1], s[2], s[3]);
    let grad: Vec<f64> = grads
        .get(conv)
        .expect("requested")
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let hw = h * w;
    let weights = (0..k)
        .map(|c| grad[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let a: Vec<f64> = act.data().iter().map(|v| v.as_f64()).collect();
    let (mode, p, q) = mode_for(p);
    Ok(ExplanationMap::from_parts(weights, &a, h, w, mode, p, q))
}

fn one_hot<T: Scalar>(n: usize, c: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([1, n]);
    t.data_mut()[c] = T::one();
    t
}

/// Grad-CAM for class `class`: backpropagates the logit `y_class`.
pub fn gradcam<T: Scalar>(net: &Network<T>, x: &Tensor<T>, class: usize) -> Result<ExplanationMap> {
    let n = net.num_classes();
    if class >= n {
        return Err(Error::OutOfRange {
            index: class,
            limit: n,
        });
    }
    let g = net.graph_with(|b, y| {
        let m = b.input("mask", &[n]);
        let picked = b.binary(Op::Mul, y, m);
        Some(b.unary(Op::Sum, picked))
    });
    map_from_graph(net, &g, x, vec![("mask", one_hot(n, class))], |p| {
        (CamMode::GradCam, p, class)
    })
}

/// Contrastive Grad-CAM answering "why P, rather than Q?". With `q == P`
/// this is the self-contrast map.
pub fn contrastive_cam<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    q: usize,
    loss: ContrastLoss,
) -> Result<ExplanationMap> {
    let n = net.num_classes();
    if q >= n {
        return Err(Error::OutOfRange { index: q, limit: n });
    }
    let (g, target) = match loss {
        ContrastLoss::Exponential => {
            let g = net.graph_with(|b, y| {
                let m = b.input("target", &[n]);
                let yq = b.binary(Op::Mul, y, m);
                let yq = b.unary(Op::Sum, yq);
                let e = b.unary(Op::Exp, y);
                let e = b.unary(Op::Sum, e);
                Some(b.binary(Op::Sub, e, yq))
            });
            (g, one_hot(n, q))
        }
        ContrastLoss::MseM(m) => {
            let t = ContrastTarget::new(n, q, m)?;
            let g = net.graph_with(|b, y| Some(LossKind::MseM.build(b, y, n)));
            (g, Tensor::from_f64([1, n], &t.values)?)
        }
    };
    map_from_graph(net, &g, x, vec![("target", target)], |p| {
        let mode = if p == q {
            CamMode::SelfContrast
        } else {
            CamMode::Contrastive
        };
        (mode, p, q)
    })
}

/// One contrastive map for every class `Q` in `0..N`, in class order.
pub fn contrastive_maps<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    loss: ContrastLoss,
) -> Result<Vec<ExplanationMap>> {
    (0..net.num_classes())
        .map(|q| contrastive_cam(net, x, q, loss))
        .collect()
}
