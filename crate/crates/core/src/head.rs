//! The MLP head `H` trained on contrastive features, and contrastive
//! prediction `ỹ = argmax H(r_x)`.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::contrast::{ContrastiveFeature, ExtractConfig, Extraction, Extractor, LossKind};
use crate::error::{Error, Result};
use crate::nn::{
    train, Checkpoint, Init, LayerSpec, Network, Prediction, Role, TrainConfig, TrainOutcome,
};
use crate::scalar::{argmax, Scalar};
use crate::tensor::Tensor;

/// What a head was trained against. Features produced under a different
/// tuple are refused.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pairing {
    pub num_classes: usize,
    /// Width `d_{L-1}` of each contrast block.
    pub feature_dim: usize,
    pub config: ExtractConfig,
    /// Hash of the base network state and the extraction config.
    pub base_fingerprint: u64,
}

impl Pairing {
    pub fn for_base<T: Scalar>(
        base: &Network<T>,
        magnitude: Option<f64>,
        config: ExtractConfig,
    ) -> Self {
        Pairing {
            num_classes: base.num_classes(),
            feature_dim: base.feature_dim(),
            config,
            base_fingerprint: fingerprint(base, magnitude, &config),
        }
    }

    pub fn feature_len(&self) -> usize {
        self.num_classes * self.feature_dim
    }

    /// Check a feature's `(loss kind, normalization, N, d)` tuple.
    pub fn accepts<T: Scalar>(&self, f: &ContrastiveFeature<T>) -> Result<()> {
        if f.num_classes != self.num_classes || f.block_dim != self.feature_dim {
            return Err(Error::Pairing(format!(
                "feature is {}x{}, head expects {}x{}",
                f.num_classes, f.block_dim, self.num_classes, self.feature_dim
            )));
        }
        if f.len() != self.feature_len() {
            return Err(Error::Pairing(format!(
                "feature has {} values, head expects {}",
                f.len(),
                self.feature_len()
            )));
        }
        if f.loss != self.config.extraction.loss() {
            return Err(Error::Pairing(format!(
                "feature extracted with {}, head trained on {}",
                kind_name(f.loss),
                kind_name(self.config.extraction.loss())
            )));
        }
        if f.normalized != self.config.normalize {
            return Err(Error::Pairing(
                "normalization differs from the head's training features".into(),
            ));
        }
        Ok(())
    }
}

fn kind_name(k: Option<LossKind>) -> &'static str {
    k.map_or("sign-step accumulation", LossKind::name)
}

/// First 8 bytes (little-endian) of SHA-256 over the base checkpoint bytes
/// followed by the extraction config.
pub fn fingerprint<T: Scalar>(
    base: &Network<T>,
    magnitude: Option<f64>,
    config: &ExtractConfig,
) -> u64 {
    let ck = Checkpoint {
        network: base.clone(),
        epoch: 0,
        magnitude,
        role: Role::Base,
    };
    let mut h = Sha256::new();
    h.update(ck.to_bytes());
    match config.extraction {
        Extraction::Gradient(k) => h.update([0, k.code()]),
        Extraction::Fgsm { epsilon, max_iters } => {
            h.update([1]);
            h.update(epsilon.to_le_bytes());
            h.update((max_iters as u64).to_le_bytes());
        }
    }
    h.update([config.normalize as u8]);
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Layer widths for a head over `d_feat` inputs and `classes` outputs.
pub fn head_widths(classes: usize, d_feat: usize) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::invalid(format!(
            "a head needs at least 2 classes, got {classes}"
        )));
    }
    if d_feat == 0 || !d_feat.is_multiple_of(classes) {
        return Err(Error::invalid(format!(
            "feature width {d_feat} is not a positive multiple of {classes} classes"
        )));
    }
    let hidden: &[usize] = if d_feat <= 1024 {
        &[300, 100]
    } else {
        &[1000, 500, 300, 100]
    };
    let mut w = vec![d_feat];
    w.extend_from_slice(hidden);
    w.push(classes);
    Ok(w)
}

/// Sigmoid MLP with the width template of [`head_widths`].
pub fn build_head<T: Scalar>(classes: usize, d_feat: usize, seed: u64) -> Result<Network<T>> {
    let widths = head_widths(classes, d_feat)?;
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        if i > 0 {
            layers.push(LayerSpec::Sigmoid);
        }
        layers.push(LayerSpec::Dense {
            inputs: pair[0],
            outputs: pair[1],
        });
    }
    Network::with_init(&[d_feat], layers, seed, Init::GlorotSigmoid)
}

/// Widths of a head network's dense layers, input first.
pub fn widths_of<T: Scalar>(net: &Network<T>) -> Vec<usize> {
    let mut out = Vec::new();
    for l in net.layers() {
        if let LayerSpec::Dense { inputs, outputs } = *l {
            if out.is_empty() {
                out.push(inputs);
            }
            out.push(outputs);
        }
    }
    out
}

/// A head together with the pairing it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveHead<T: Scalar> {
    pub network: Network<T>,
    pub pairing: Pairing,
}

/// Stack features into a `[n, d_feat]` tensor after pairing checks.
pub fn feature_matrix<T: Scalar>(
    pairing: &Pairing,
    features: &[ContrastiveFeature<T>],
) -> Result<Tensor<T>> {
    let d = pairing.feature_len();
    let mut data = Vec::with_capacity(features.len() * d);
    for f in features {
        pairing.accepts(f)?;
        data.extend_from_slice(&f.data);
    }
    Tensor::new([features.len(), d], data)
}

impl<T: Scalar> ContrastiveHead<T> {
    pub fn new(network: Network<T>, pairing: Pairing) -> Result<Self> {
        if network.input_shape() != [pairing.feature_len()] {
            return Err(Error::Pairing(format!(
                "head input {:?} does not match feature length {}",
                network.input_shape(),
                pairing.feature_len()
            )));
        }
        if network.num_classes() != pairing.num_classes {
            return Err(Error::Pairing(format!(
                "head has {} outputs, base has {} classes",
                network.num_classes(),
                pairing.num_classes
            )));
        }
        Ok(ContrastiveHead { network, pairing })
    }

    /// Fresh head for `base` under `config`.
    pub fn for_base(
        base: &Network<T>,
        magnitude: Option<f64>,
        config: ExtractConfig,
        seed: u64,
    ) -> Result<Self> {
        let pairing = Pairing::for_base(base, magnitude, config);
        let network = build_head(pairing.num_classes, pairing.feature_len(), seed)?;
        Self::new(network, pairing)
    }

    /// Cross-entropy SGD on `features` with ground-truth `labels`.
    pub fn train(
        &mut self,
        features: &[ContrastiveFeature<T>],
        labels: &[usize],
        config: &TrainConfig,
    ) -> Result<TrainOutcome<T>> {
        let x = feature_matrix(&self.pairing, features)?;
        train(&mut self.network, &x, labels, config)
    }

    /// Head decision on one feature.
    pub fn classify(&self, f: &ContrastiveFeature<T>) -> Result<Prediction> {
        self.pairing.accepts(f)?;
        let x = Tensor::new([1, f.len()], f.data.clone())?;
        let logits = self.network.logits(&x)?;
        Ok(Prediction::from_logits(
            logits.data().iter().map(|v| v.as_f64()).collect(),
        ))
    }

    /// Labels for a batch of features, in order.
    pub fn classify_all(&self, features: &[ContrastiveFeature<T>]) -> Result<Vec<usize>> {
        let x = feature_matrix(&self.pairing, features)?;
        if features.is_empty() {
            return Ok(Vec::new());
        }
        self.network.predict_labels(&x)
    }

    /// Percentage of `features` classified as `labels`.
    pub fn accuracy(&self, features: &[ContrastiveFeature<T>], labels: &[usize]) -> Result<f64> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid(
                "features and labels must be non-empty and of equal count",
            ));
        }
        let pred = self.classify_all(features)?;
        let ok = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(100.0 * ok as f64 / labels.len() as f64)
    }

    pub fn checkpoint(&self, epoch: u32) -> Checkpoint<T> {
        Checkpoint {
            network: self.network.clone(),
            epoch,
            magnitude: None,
            role: Role::Head(self.pairing),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        match ck.role {
            Role::Head(pairing) => Self::new(ck.network, pairing),
            Role::Base => Err(Error::Pairing(
                "checkpoint holds a base network, not a head".into(),
            )),
        }
    }
}

/// Result of `F(x)`: forward → P → r_x → H → argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePrediction {
    pub logits: Vec<f64>,
    pub label: usize,
    /// Feed-forward prediction P the feature was conditioned on.
    pub base_label: usize,
}

/// A base network and a head verified to belong together.
pub struct ContrastivePipeline<'a, T: Scalar> {
    base: &'a Network<T>,
    head: &'a ContrastiveHead<T>,
    extractor: Extractor<'a, T>,
}

impl<'a, T: Scalar> ContrastivePipeline<'a, T> {
    pub fn new(
        base: &'a Network<T>,
        magnitude: Option<f64>,
        head: &'a ContrastiveHead<T>,
    ) -> Result<Self> {
        let expected = Pairing::for_base(base, magnitude, head.pairing.config);
        if expected.num_classes != head.pairing.num_classes
            || expected.feature_dim != head.pairing.feature_dim
        {
            return Err(Error::Pairing(format!(
                "base produces {}x{} features, head expects {}x{}",
                expected.num_classes,
                expected.feature_dim,
                head.pairing.num_classes,
                head.pairing.feature_dim
            )));
        }
        if expected.base_fingerprint != head.pairing.base_fingerprint {
            return Err(Error::Pairing(format!(
                "fingerprint {:016x} does not match the head's {:016x}",
                expected.base_fingerprint, head.pairing.base_fingerprint
            )));
        }
        let extractor = Extractor::new(base, head.pairing.config, magnitude)?;
        Ok(ContrastivePipeline {
            base,
            head,
            extractor,
        })
    }

    pub fn base(&self) -> &Network<T> {
        self.base
    }

    pub fn extractor(&self) -> &Extractor<'a, T> {
        &self.extractor
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<ContrastivePrediction> {
        let f = self.extractor.extract(x, 0)?;
        let p = self.head.classify(&f)?;
        Ok(ContrastivePrediction {
            logits: p.logits,
            label: p.label,
            base_label: f.predicted,
        })
    }

    /// Predictions for every sample of `[B, ...]`, in order.
    pub fn predict_batch(&self, images: &Tensor<T>) -> Result<Vec<ContrastivePrediction>> {
        let n = images.shape().first().copied().unwrap_or(0);
        (0..n)
            .into_par_iter()
            .map(|i| self.predict(&images.batch_item(i)))
            .collect()
    }
}

/// Head decision ignoring pairing metadata; used for constructed heads.
pub fn head_logits<T: Scalar>(head: &Network<T>, feature: &[T]) -> Result<(Vec<f64>, usize)> {
    let x = Tensor::new([1, feature.len()], feature.to_vec())?;
    let logits: Vec<f64> = head.logits(&x)?.data().iter().map(|v| v.as_f64()).collect();
    let label = argmax(&logits);
    Ok((logits, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_widths() {
        assert_eq!(head_widths(10, 640).unwrap(), vec![640, 300, 100, 10]);
        assert_eq!(head_widths(12, 768).unwrap(), vec![768, 300, 100, 12]);
        assert_eq!(head_widths(2, 8).unwrap(), vec![8, 300, 100, 2]);
        assert_eq!(
            head_widths(10, 2560).unwrap(),
            vec![2560, 1000, 500, 300, 100, 10]
        );
        assert!(head_widths(10, 645).is_err());
        assert!(head_widths(1, 8).is_err());
    }

    #[test]
    fn built_head_has_sigmoids_between_layers() {
        let h = build_head::<f64>(2, 8, 0).unwrap();
        assert_eq!(widths_of(&h), vec![8, 300, 100, 2]);
        let kinds: Vec<_> = h
            .layers()
            .iter()
            .map(|l| matches!(l, LayerSpec::Sigmoid))
            .collect();
        assert_eq!(kinds, vec![false, true, false, true, false]);
    }
}
