//! Mini-batch SGD with momentum and a piecewise-constant learning-rate schedule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::autodiff::{GraphBuilder, NodeId, Op, Pass};
use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};
use crate::tensor::Tensor;

/// Learning rate `lr` applied for epochs in `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub start: usize,
    pub end: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Empty means [`TrainConfig::thirds_schedule`] over `epochs`.
    pub lr_schedule: Vec<LrStage>,
    pub seed: u64,
    /// Flip each sample horizontally with probability 1/2.
    pub hflip: bool,
    /// Snapshot the network before training and after every `k` epochs.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 128,
            momentum: 0.9,
            lr_schedule: Vec::new(),
            seed: 0,
            hflip: false,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// `0.1 / 0.004 / 0.0008` over consecutive thirds of `epochs`.
    pub fn thirds_schedule(epochs: usize) -> Vec<LrStage> {
        Self::thirds_with(epochs, [0.1, 0.004, 0.0008])
    }

    pub fn thirds_with(epochs: usize, rates: [f64; 3]) -> Vec<LrStage> {
        let a = epochs / 3;
        let b = 2 * epochs / 3;
        [(0, a, rates[0]), (a, b, rates[1]), (b, epochs, rates[2])]
            .into_iter()
            .filter(|(s, e, _)| e > s)
            .map(|(start, end, lr)| LrStage { start, end, lr })
            .collect()
    }

    /// Constant learning rate over every epoch.
    pub fn constant(epochs: usize, lr: f64) -> Vec<LrStage> {
        vec![LrStage {
            start: 0,
            end: epochs,
            lr,
        }]
    }

    pub fn schedule(&self) -> Vec<LrStage> {
        if self.lr_schedule.is_empty() {
            Self::thirds_schedule(self.epochs)
        } else {
            self.lr_schedule.clone()
        }
    }

    /// Schedule stages must tile `[0, epochs)` exactly.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint_every must be positive"));
        }
        let mut stages = self.schedule();
        stages.sort_by_key(|s| s.start);
        let mut next = 0;
        for s in &stages {
            if s.start != next || s.end <= s.start {
                return Err(Error::invalid(format!(
                    "schedule must cover [0, {}) without gaps or overlap; stage {:?} breaks it",
                    self.epochs, s
                )));
            }
            if s.lr < 0.0 || !s.lr.is_finite() {
                return Err(Error::invalid(
                    "learning rates must be finite and non-negative",
                ));
            }
            next = s.end;
        }
        if next != self.epochs {
            return Err(Error::invalid(format!(
                "schedule ends at {next}, expected {}",
                self.epochs
            )));
        }
        Ok(())
    }

    /// The learning rate of the unique stage covering `epoch`.
    pub fn lr_at(&self, epoch: usize) -> Option<f64> {
        self.schedule()
            .iter()
            .find(|s| s.start <= epoch && epoch < s.end)
            .map(|s| s.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Training accuracy in percent, measured on the augmented batches.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub history: Vec<EpochStats>,
    /// `(epochs completed, network)` snapshots when `checkpoint_every` is set.
    pub checkpoints: Vec<(usize, Network<T>)>,
}

/// Mean softmax cross-entropy over the batch, `target` being one-hot rows.
pub(crate) fn cross_entropy_tail(b: &mut GraphBuilder, logits: NodeId, classes: usize) -> NodeId {
    let target = b.input("target", &[classes]);
    let lse = b.unary(Op::LogSumExp, logits);
    let picked = b.binary(Op::Mul, logits, target);
    let picked = b.unary(Op::SumLast, picked);
    let nll = b.binary(Op::Sub, lse, picked);
    b.unary(Op::Mean, nll)
}

pub(crate) fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = T::one();
    }
    t
}

/// Mirror `[C, H, W]` samples left-right in place.
fn hflip_sample<T: Scalar>(sample: &mut [T], shape: &[usize]) {
    if shape.len() != 3 {
        return;
    }
    let w = shape[2];
    for row in sample.chunks_mut(w) {
        row.reverse();
    }
}

/// Check labels and sample shape against the network.
pub(crate) fn check_dataset<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<()> {
    if labels.is_empty() || images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.shape()[0] != labels.len() {
        return Err(Error::invalid(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    if &images.shape()[1..] != net.input_shape() {
        return Err(Error::shape(
            0,
            format!(
                "dataset samples {:?} do not match network input {:?}",
                &images.shape()[1..],
                net.input_shape()
            ),
        ));
    }
    let classes = net.num_classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Train `net` in place with cross-entropy and momentum SGD
/// (`v ← μ·v + g`, `p ← p − lr·v`). Deterministic given `config.seed`.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    check_dataset(net, images, labels)?;

    let classes = net.num_classes();
    let g = net.graph_with(|b, logits| Some(cross_entropy_tail(b, logits, classes)));
    let loss = g.loss.expect("loss tail");
    let param_nodes: Vec<(String, NodeId)> = g
        .graph
        .params()
        .map(|(n, id)| (n.to_string(), id))
        .collect();
    let wrt: Vec<NodeId> = param_nodes.iter().map(|(_, id)| *id).collect();

    let mut velocity: Vec<Vec<f64>> = param_nodes
        .iter()
        .map(|(n, _)| vec![0.0; net.params().get(n).expect("bound").len()])
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = labels.len();
    let per: usize = images.shape()[1..].iter().product();
    let sample_shape = images.shape()[1..].to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    if config.checkpoint_every.is_some() {
        checkpoints.push((0, net.clone()));
    }

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch).expect("validated schedule");
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * per);
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let start = data.len();
                data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
                if config.hflip && rng.gen_bool(0.5) {
                    hflip_sample(&mut data[start..], &sample_shape);
                }
                batch_labels.push(labels[i]);
            }
            let mut shape = vec![batch.len()];
            shape.extend_from_slice(&sample_shape);
            let x = Tensor::new(shape, data)?;

            let grads = {
                let mut pass = Pass::new(&g.graph, net.params())?;
                pass.forward(vec![("x", x), ("target", one_hot(&batch_labels, classes))])?;
                loss_sum += pass.value(loss)?.item().as_f64() * batch.len() as f64;
                let logits = pass.value(g.nodes.logits)?;
                correct += logits
                    .data()
                    .chunks(classes)
                    .zip(&batch_labels)
                    .filter(|(row, &l)| argmax(row) == l)
                    .count();
                pass.backward(loss, &wrt)?
            };

            for ((name, id), v) in param_nodes.iter().zip(velocity.iter_mut()) {
                let grad = grads.get(*id).expect("requested");
                let p = net.params_mut().get_mut(name).expect("bound");
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                    *vv = config.momentum * *vv + gv.as_f64();
                    *pv = T::of(pv.as_f64() - lr * *vv);
                }
            }
        }
        history.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            accuracy: 100.0 * correct as f64 / n as f64,
        });
        if let Some(k) = config.checkpoint_every {
            let done = epoch + 1;
            if done % k == 0 || done == config.epochs {
                checkpoints.push((done, net.clone()));
            }
        }
    }
    Ok(TrainOutcome {
        history,
        checkpoints,
    })
}

/// Percentage of samples whose feed-forward prediction matches the label.
pub fn accuracy<T: Scalar>(net: &Network<T>, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    check_dataset(net, images, labels)?;
    let pred = net.predict_labels(images)?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}
