//! The contrast loss family.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, NodeId, Op, Pass};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss backpropagated to obtain one contrast block.
///
/// All kinds reduce with a mean, as the usual framework defaults do.
/// `-M` variants consume the magnitude target `δ^M`; the others a one-hot
/// (or, for soft margin, a ±1) target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    MseM,
    Ce,
    Bce,
    L1,
    L1M,
    #[serde(rename = "smoothl1")]
    SmoothL1,
    #[serde(rename = "smoothl1-m")]
    SmoothL1M,
    Nll,
    #[serde(rename = "softmargin")]
    SoftMargin,
}

impl LossKind {
    pub const ALL: [LossKind; 9] = [
        LossKind::MseM,
        LossKind::Ce,
        LossKind::Bce,
        LossKind::L1,
        LossKind::L1M,
        LossKind::SmoothL1,
        LossKind::SmoothL1M,
        LossKind::Nll,
        LossKind::SoftMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::MseM => "mse-m",
            LossKind::Ce => "ce",
            LossKind::Bce => "bce",
            LossKind::L1 => "l1",
            LossKind::L1M => "l1-m",
            LossKind::SmoothL1 => "smoothl1",
            LossKind::SmoothL1M => "smoothl1-m",
            LossKind::Nll => "nll",
            LossKind::SoftMargin => "softmargin",
        }
    }

    /// Stable one-byte code used in file headers.
    pub fn code(self) -> u8 {
        match self {
            LossKind::MseM => 0,
            LossKind::Ce => 1,
            LossKind::Bce => 2,
            LossKind::L1 => 3,
            LossKind::L1M => 4,
            LossKind::SmoothL1 => 5,
            LossKind::SmoothL1M => 6,
            LossKind::Nll => 7,
            LossKind::SoftMargin => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.code() == code)
    }

    /// Whether the target carries the magnitude `M`.
    pub fn uses_magnitude(self) -> bool {
        matches!(self, LossKind::MseM | LossKind::L1M | LossKind::SmoothL1M)
    }

    /// Target vector for contrast class `class`.
    pub fn target(self, classes: usize, class: usize, magnitude: Option<f64>) -> Result<Vec<f64>> {
        if class >= classes {
            return Err(Error::OutOfRange {
                index: class,
                limit: classes,
            });
        }
        Ok(match self {
            k if k.uses_magnitude() => {
                let m = magnitude.ok_or_else(|| {
                    Error::invalid(format!("{k} needs the magnitude M of a trained network"))
                })?;
                ContrastTarget::new(classes, class, m)?.values
            }
            LossKind::SoftMargin => (0..classes)
                .map(|j| if j == class { 1.0 } else { -1.0 })
                .collect(),
            _ => (0..classes)
                .map(|j| if j == class { 1.0 } else { 0.0 })
                .collect(),
        })
    }

    /// Append this loss over `logits` to a graph. Adds an input named
    /// `target` shaped like one row of logits.
    pub fn build(self, b: &mut GraphBuilder, logits: NodeId, classes: usize) -> NodeId {
        let t = b.input("target", &[classes]);
        match self {
            LossKind::MseM => {
                let d = b.binary(Op::Sub, logits, t);
                let d = b.unary(Op::Square, d);
                b.unary(Op::Mean, d)
            }
            LossKind::Ce => {
                let lse = b.unary(Op::LogSumExp, logits);
                let picked = b.binary(Op::Mul, logits, t);
                let picked = b.unary(Op::SumLast, picked);
                let per = b.binary(Op::Sub, lse, picked);
                b.unary(Op::Mean, per)
            }
            LossKind::Bce => {
                let sp = b.unary(Op::Softplus, logits);
                let ty = b.binary(Op::Mul, logits, t);
                let d = b.binary(Op::Sub, sp, ty);
                b.unary(Op::Mean, d)
            }
            LossKind::L1 | LossKind::L1M => {
                let d = b.binary(Op::Sub, logits, t);
                let d = b.unary(Op::Abs, d);
                b.unary(Op::Mean, d)
            }
            LossKind::SmoothL1 | LossKind::SmoothL1M => {
                let d = b.binary(Op::Sub, logits, t);
                let d = b.unary(Op::SmoothL1, d);
                b.unary(Op::Mean, d)
            }
            LossKind::Nll => {
                let picked = b.binary(Op::Mul, logits, t);
                let picked = b.unary(Op::SumLast, picked);
                let m = b.unary(Op::Mean, picked);
                b.unary(Op::Scale(-1.0), m)
            }
            LossKind::SoftMargin => {
                let ty = b.binary(Op::Mul, logits, t);
                let neg = b.unary(Op::Scale(-1.0), ty);
                let sp = b.unary(Op::Softplus, neg);
                b.unary(Op::Mean, sp)
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown loss kind `{s}`")))
    }
}

/// The modified Kronecker target: `M` at the contrast class, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastTarget {
    pub class: usize,
    pub magnitude: f64,
    pub values: Vec<f64>,
}

impl ContrastTarget {
    pub fn new(classes: usize, class: usize, magnitude: f64) -> Result<Self> {
        if class >= classes {
            return Err(Error::OutOfRange {
                index: class,
                limit: classes,
            });
        }
        if !(magnitude > 0.0 && magnitude.is_finite()) {
            return Err(Error::invalid(format!(
                "magnitude must be positive, got {magnitude}"
            )));
        }
        let mut values = vec![0.0; classes];
        values[class] = magnitude;
        Ok(ContrastTarget {
            class,
            magnitude,
            values,
        })
    }
}

/// Evaluate a loss on one logit row against `target`.
pub fn loss_eval(kind: LossKind, logits: &[f64], target: &[f64]) -> Result<f64> {
    let n = logits.len();
    if n == 0 || target.len() != n {
        return Err(Error::invalid(format!(
            "logits ({n}) and target ({}) must have the same nonzero length",
            target.len()
        )));
    }
    if logits.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in logits or target"));
    }
    let mut b = GraphBuilder::new();
    let y = b.input("y", &[n]);
    let loss = kind.build(&mut b, y, n);
    let g = b.finish();
    let params = crate::autodiff::ParamStore::<f64>::new();
    let mut pass = Pass::new(&g, &params)?;
    pass.forward(vec![
        ("y", Tensor::new([1, n], logits.to_vec())?),
        ("target", Tensor::new([1, n], target.to_vec())?),
    ])?;
    Ok(pass.value(loss)?.item())
}
