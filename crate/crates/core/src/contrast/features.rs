//! Per-class gradient features `r_x = [r_1 … r_N]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::LossKind;
use crate::autodiff::Pass;
use crate::error::{Error, Result};
use crate::nn::{NetGraph, Network};
use crate::scalar::{argmax, Scalar};
use crate::tensor::Tensor;

/// How each contrast block is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extraction {
    /// Signed final-layer gradient of one loss evaluation per class.
    Gradient(LossKind),
    /// Absolute gradients accumulated along a targeted sign-step walk.
    Fgsm { epsilon: f64, max_iters: usize },
}

impl Extraction {
    pub fn loss(&self) -> Option<LossKind> {
        match *self {
            Extraction::Gradient(k) => Some(k),
            Extraction::Fgsm { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub extraction: Extraction,
    /// Scale each feature vector to unit L2 norm.
    pub normalize: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            extraction: Extraction::Gradient(LossKind::MseM),
            normalize: true,
        }
    }
}

impl ExtractConfig {
    pub fn gradient(kind: LossKind) -> Self {
        ExtractConfig {
            extraction: Extraction::Gradient(kind),
            normalize: true,
        }
    }
}

/// A contrastive feature: `N` blocks of `d_{L-1}` values in class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveFeature<T> {
    pub data: Vec<T>,
    pub num_classes: usize,
    pub block_dim: usize,
    pub sample_id: u32,
    /// Feed-forward prediction of the base network for this sample.
    pub predicted: usize,
    /// Loss that produced the blocks; `None` for sign-step features.
    pub loss: Option<LossKind>,
    pub normalized: bool,
    /// Classes whose sign-step walk hit the iteration cap (FGSM only).
    pub nonconverged: Vec<usize>,
}

impl<T: Scalar> ContrastiveFeature<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, class: usize) -> &[T] {
        &self.data[class * self.block_dim..(class + 1) * self.block_dim]
    }

    /// Scale to unit L2 norm. A zero vector stays zero; an already
    /// normalized feature is left untouched.
    pub fn normalize(&mut self) {
        if self.normalized {
            return;
        }
        let mut v: Vec<f64> = self.data.iter().map(|x| x.as_f64()).collect();
        l2_normalize(&mut v);
        self.data = v.into_iter().map(T::of).collect();
        self.normalized = true;
    }
}

/// Scale `v` to unit Euclidean norm in place; zero vectors are unchanged.
pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Mean over `images` of the largest logit.
pub fn compute_magnitude<T: Scalar>(net: &Network<T>, images: &Tensor<T>) -> Result<f64> {
    if images.is_empty() || images.rank() == 0 || images.shape()[0] == 0 {
        return Err(Error::EmptyDataset);
    }
    const CHUNK: usize = 128;
    let n = images.shape()[0];
    let per = images.len() / n;
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let maxima: Result<Vec<Vec<f64>>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + CHUNK).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = e - s;
            let chunk = Tensor::new(shape, images.data()[s * per..e * per].to_vec())?;
            let logits = net.logits(&chunk)?;
            Ok(logits
                .data()
                .chunks(net.num_classes())
                .map(|row| {
                    row.iter()
                        .map(|v| v.as_f64())
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect())
        })
        .collect();
    let sum: f64 = maxima?.into_iter().flatten().sum();
    Ok(sum / n as f64)
}

/// Reusable extractor bound to one network and configuration.
pub struct Extractor<'a, T: Scalar> {
    net: &'a Network<T>,
    config: ExtractConfig,
    magnitude: Option<f64>,
    graph: NetGraph,
}

impl<'a, T: Scalar> Extractor<'a, T> {
    /// `magnitude` is required by the `-M` loss kinds; a network without it
    /// is treated as untrained and rejected.
    pub fn new(net: &'a Network<T>, config: ExtractConfig, magnitude: Option<f64>) -> Result<Self> {
        let classes = net.num_classes();
        let kind = match config.extraction {
            Extraction::Gradient(kind) => {
                if kind.uses_magnitude() && !magnitude.is_some_and(|m| m > 0.0 && m.is_finite()) {
                    return Err(Error::invalid(format!(
                        "loss {kind} needs a trained network with a positive magnitude M, got {magnitude:?}"
                    )));
                }
                kind
            }
            Extraction::Fgsm { epsilon, max_iters } => {
                if !(epsilon >= 0.0 && epsilon.is_finite()) {
                    return Err(Error::invalid(format!(
                        "epsilon must be finite and >= 0, got {epsilon}"
                    )));
                }
                if max_iters == 0 {
                    return Err(Error::invalid("max_iters must be at least 1"));
                }
                LossKind::Ce
            }
        };
        let graph = net.graph_with(|b, logits| Some(kind.build(b, logits, classes)));
        Ok(Extractor {
            net,
            config,
            magnitude,
            graph,
        })
    }

    pub fn config(&self) -> &ExtractConfig {
        &self.config
    }

    fn target(&self, class: usize) -> Result<Tensor<T>> {
        let classes = self.net.num_classes();
        let kind = self.config.extraction.loss().unwrap_or(LossKind::Ce);
        Tensor::from_f64([1, classes], &kind.target(classes, class, self.magnitude)?)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        let n = self.net.num_classes();
        if class >= n {
            return Err(Error::OutOfRange {
                index: class,
                limit: n,
            });
        }
        Ok(())
    }

    /// Gradient of the class-`class` loss with respect to row `class` of the
    /// final weight: one forward and one backward pass.
    pub fn contrast(&self, x: &Tensor<T>, class: usize) -> Result<Vec<T>> {
        self.check_class(class)?;
        if self.config.extraction.loss().is_none() {
            return Err(Error::invalid(
                "single-class contrast is defined for gradient extraction only",
            ));
        }
        let mut pass = Pass::new(&self.graph.graph, self.net.params())?;
        pass.forward(vec![
            ("x", self.net.batched(x)?),
            ("target", self.target(class)?),
        ])?;
        self.row_gradient(&pass, class)
    }

    fn row_gradient(&self, pass: &Pass<'_, T>, class: usize) -> Result<Vec<T>> {
        let w = self.graph.nodes.final_weight;
        let grads = pass.backward(self.graph.loss.expect("loss tail"), &[w])?;
        let g = grads.get(w).expect("requested");
        let d = self.net.feature_dim();
        Ok(g.data()[class * d..(class + 1) * d].to_vec())
    }

    /// Full feature for one sample.
    pub fn extract(&self, x: &Tensor<T>, sample_id: u32) -> Result<ContrastiveFeature<T>> {
        let x = self.net.batched(x)?;
        if x.shape()[0] != 1 {
            return Err(Error::invalid("extract takes a single sample"));
        }
        let mut feature = match self.config.extraction {
            Extraction::Gradient(_) => self.extract_gradient(x, sample_id)?,
            Extraction::Fgsm { epsilon, max_iters } => {
                self.extract_fgsm(x, sample_id, epsilon, max_iters)?
            }
        };
        if self.config.normalize {
            feature.normalize();
        }
        Ok(feature)
    }

    fn extract_gradient(&self, x: Tensor<T>, sample_id: u32) -> Result<ContrastiveFeature<T>> {
        let n = self.net.num_classes();
        let d = self.net.feature_dim();
        let mut pass = Pass::new(&self.graph.graph, self.net.params())?;
        pass.forward(vec![("x", x), ("target", self.target(0)?)])?;
        let logits = pass.value(self.graph.nodes.logits)?;
        let predicted = argmax(logits.data());
        let mut data = Vec::with_capacity(n * d);
        for class in 0..n {
            if class > 0 {
                // Only the loss tail depends on the target.
                pass.set_input("target", self.target(class)?)?;
            }
            data.extend(self.row_gradient(&pass, class)?);
        }
        Ok(ContrastiveFeature {
            data,
            num_classes: n,
            block_dim: d,
            sample_id,
            predicted,
            loss: self.config.extraction.loss(),
            normalized: false,
            nonconverged: Vec::new(),
        })
    }

    fn extract_fgsm(
        &self,
        x0: Tensor<T>,
        sample_id: u32,
        epsilon: f64,
        max_iters: usize,
    ) -> Result<ContrastiveFeature<T>> {
        let n = self.net.num_classes();
        let d = self.net.feature_dim();
        let predicted = self.net.predict(&x0)?.label;
        let mut data = Vec::with_capacity(n * d);
        let mut nonconverged = Vec::new();
        for class in 0..n {
            let walk = fgsm_walk(self, &x0, class, epsilon, max_iters)?;
            if !walk.converged {
                nonconverged.push(class);
            }
            data.extend(walk.accumulated.into_iter().map(T::of));
        }
        Ok(ContrastiveFeature {
            data,
            num_classes: n,
            block_dim: d,
            sample_id,
            predicted,
            loss: None,
            normalized: false,
            nonconverged,
        })
    }

    /// Features for every sample of a batch `[B, ...]`, in sample order.
    /// Sample ids are `first_id + index`.
    pub fn extract_batch(
        &self,
        images: &Tensor<T>,
        first_id: u32,
    ) -> Result<Vec<ContrastiveFeature<T>>> {
        let count = images.shape().first().copied().unwrap_or(0);
        (0..count)
            .into_par_iter()
            .map(|i| self.extract(&images.batch_item(i), first_id + i as u32))
            .collect()
    }
}

/// Outcome of one targeted sign-step walk.
#[derive(Debug, Clone, PartialEq)]
pub struct FgsmWalk {
    /// `Σ_j |∂J(x_j)/∂W_L[class]|`
    pub accumulated: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Walk `x_{j+1} = x_j − ε·sign(∇_x CE(x_j, class))` towards `class`,
/// accumulating absolute final-row gradients, until the network predicts
/// `class` or `max_iters` steps were taken.
fn fgsm_walk<T: Scalar>(
    ex: &Extractor<'_, T>,
    x0: &Tensor<T>,
    class: usize,
    epsilon: f64,
    max_iters: usize,
) -> Result<FgsmWalk> {
    let g = &ex.graph;
    let w = g.nodes.final_weight;
    let input = g.nodes.input;
    let loss = g.loss.expect("loss tail");
    let d = ex.net.feature_dim();
    let target = ex.target(class)?;
    let mut pass = Pass::new(&g.graph, ex.net.params())?;
    let mut x = x0.clone();
    pass.forward(vec![("x", x.clone()), ("target", target.clone())])?;
    let mut accumulated = vec![0.0; d];
    let mut iterations = 0;
    loop {
        let grads = pass.backward(loss, &[w, input])?;
        let gw = grads.get(w).expect("requested");
        for (a, v) in accumulated
            .iter_mut()
            .zip(&gw.data()[class * d..(class + 1) * d])
        {
            *a += v.as_f64().abs();
        }
        iterations += 1;
        let gx = grads.get(input).expect("requested");
        let stepped: Vec<f64> = x
            .data()
            .iter()
            .zip(gx.data())
            .map(|(xv, gv)| xv.as_f64() - epsilon * sign(gv.as_f64()))
            .collect();
        x = Tensor::from_f64(x.shape(), &stepped)?;
        pass.forward(vec![("x", x.clone()), ("target", target.clone())])?;
        if argmax(pass.value(g.nodes.logits)?.data()) == class {
            return Ok(FgsmWalk {
                accumulated,
                iterations,
                converged: true,
            });
        }
        if iterations >= max_iters {
            return Ok(FgsmWalk {
                accumulated,
                iterations,
                converged: false,
            });
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-`class` gradient of `kind` for one sample.
pub fn extract_contrast<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    class: usize,
    kind: LossKind,
    magnitude: Option<f64>,
) -> Result<Vec<T>> {
    let config = ExtractConfig {
        extraction: Extraction::Gradient(kind),
        normalize: false,
    };
    Extractor::new(net, config, magnitude)?.contrast(x, class)
}

/// Concatenated (and, if configured, normalized) feature for one sample.
pub fn extract_feature<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    config: ExtractConfig,
    magnitude: Option<f64>,
) -> Result<ContrastiveFeature<T>> {
    Extractor::new(net, config, magnitude)?.extract(x, 0)
}

/// Sign-step accumulation feature for one sample.
pub fn extract_feature_fgsm<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    epsilon: f64,
    max_iters: usize,
    normalize: bool,
) -> Result<ContrastiveFeature<T>> {
    let config = ExtractConfig {
        extraction: Extraction::Fgsm { epsilon, max_iters },
        normalize,
    };
    Extractor::new(net, config, None)?.extract(x, 0)
}

/// Walk statistics for a single class, exposed for inspection.
pub fn fgsm_class_walk<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    class: usize,
    epsilon: f64,
    max_iters: usize,
) -> Result<FgsmWalk> {
    let config = ExtractConfig {
        extraction: Extraction::Fgsm { epsilon, max_iters },
        normalize: false,
    };
    let ex = Extractor::new(net, config, None)?;
    ex.check_class(class)?;
    fgsm_walk(&ex, &net.batched(x)?, class, epsilon, max_iters)
}
