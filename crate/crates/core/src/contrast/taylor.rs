//! Second-order check of the exponential contrast loss.
//!
//! The exact loss `J = −y_Q + Σ_j e^{y_j}` is compared with the two-logit
//! approximation `−y_Q + y_P²/2` through their gradients at the last
//! convolution activation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Pass};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub p: usize,
    pub q: usize,
    pub logits: Vec<f64>,
    /// Cosine between the exact and approximate gradients.
    pub cosine: f64,
    /// `‖∇ approx‖ / ‖∇ exact‖`
    pub norm_ratio: f64,
    pub exact_norm: f64,
    pub approx_norm: f64,
}

pub fn taylor_diagnostic<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    p: usize,
    q: usize,
) -> Result<TaylorReport> {
    let n = net.num_classes();
    for c in [p, q] {
        if c >= n {
            return Err(Error::OutOfRange { index: c, limit: n });
        }
    }
    if p == q {
        return Err(Error::invalid(
            "the Taylor diagnostic needs Q different from P",
        ));
    }
    let mut exact = 0;
    let mut approx = 0;
    let g = net.graph_with(|b, y| {
        let mp = b.input("mask_p", &[n]);
        let mq = b.input("mask_q", &[n]);
        let yq = b.binary(Op::Mul, y, mq);
        let yq = b.unary(Op::Sum, yq);
        let e = b.unary(Op::Exp, y);
        let e = b.unary(Op::Sum, e);
        exact = b.binary(Op::Sub, e, yq);
        let sq = b.unary(Op::Square, y);
        let sq = b.binary(Op::Mul, sq, mp);
        let sq = b.unary(Op::Sum, sq);
        let half = b.unary(Op::Scale(0.5), sq);
        approx = b.binary(Op::Sub, half, yq);
        None
    });
    let conv = g.nodes.last_conv.ok_or(Error::NoConvLayer)?;
    let mask = |c: usize| {
        let mut m = Tensor::<T>::zeros([1, n]);
        m.data_mut()[c] = T::one();
        m
    };
    let mut pass = Pass::new(&g.graph, net.params())?;
    pass.forward(vec![
        ("x", net.batched(x)?),
        ("mask_p", mask(p)),
        ("mask_q", mask(q)),
    ])?;
    let logits = pass
        .value(g.nodes.logits)?
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let ge = pass.backward(exact, &[conv])?;
    let ga = pass.backward(approx, &[conv])?;
    let a: Vec<f64> = ge
        .get(conv)
        .expect("requested")
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let b: Vec<f64> = ga
        .get(conv)
        .expect("requested")
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cosine = if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    };
    let norm_ratio = if na > 0.0 { nb / na } else { f64::INFINITY };
    Ok(TaylorReport {
        p,
        q,
        logits,
        cosine,
        norm_ratio,
        exact_norm: na,
        approx_norm: nb,
    })
}
