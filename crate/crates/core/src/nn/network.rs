use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphBuilder, NodeId, Op, Padding, ParamStore, Pass};
use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};
use crate::tensor::Tensor;

/// One entry of a network's layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Sigmoid,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some((vec![out_ch, in_ch, kernel, kernel], vec![out_ch])),
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }

    fn fan_out(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { out_ch, kernel, .. } => out_ch * kernel * kernel,
            LayerSpec::Dense { outputs, .. } => outputs,
            _ => 0,
        }
    }
}

/// Parameter initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// `U(±1/√fan_in)` for weights and biases.
    #[default]
    FanIn,
    /// `U(±4·√(6/(fan_in+fan_out)))` weights and zero biases, the usual
    /// scaling for sigmoid layers.
    GlorotSigmoid,
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("{layer}.weight")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("{layer}.bias")
}

/// Node ids of interest inside a network graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NetNodes {
    pub input: NodeId,
    /// Output of each parametric block (the layer plus the non-parametric
    /// layers that follow it), indexed from block 1.
    pub blocks: Vec<NodeId>,
    /// Activation of the last convolution layer (after its nonlinearity).
    pub last_conv: Option<NodeId>,
    /// `y_feat^{L-1}`, the vector fed to the final linear layer.
    pub penultimate: NodeId,
    pub final_weight: NodeId,
    pub final_bias: NodeId,
    pub logits: NodeId,
}

/// A network graph, optionally extended by a scalar loss.
#[derive(Debug, Clone)]
pub struct NetGraph {
    pub graph: Graph,
    pub nodes: NetNodes,
    pub loss: Option<NodeId>,
}

/// Feed-forward classifier: an ordered layer list ending in a linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: ParamStore<T>,
    num_classes: usize,
    feature_dim: usize,
}

/// Feed-forward decision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let label = argmax(&logits);
        let confidence = logits[label];
        Prediction {
            logits,
            label,
            confidence,
        }
    }
}

/// Output shape of each layer for a given per-sample input shape.
pub fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shape = input_shape.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let bad = |msg: String| Error::invalid(format!("layer {i}: {msg}"));
        shape = match *layer {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                if shape.len() != 3 || shape[0] != in_ch {
                    return Err(bad(format!("conv expects [{in_ch}, H, W], got {shape:?}")));
                }
                if stride == 0 || kernel == 0 {
                    return Err(bad("zero kernel or stride".into()));
                }
                let (h, w) = (shape[1], shape[2]);
                match padding {
                    Padding::Same => vec![out_ch, h.div_ceil(stride), w.div_ceil(stride)],
                    Padding::Valid => {
                        if h < kernel || w < kernel {
                            return Err(bad(format!("kernel {kernel} larger than {h}x{w}")));
                        }
                        vec![out_ch, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                    }
                }
            }
            LayerSpec::MaxPool { size, stride } => {
                if shape.len() != 3
                    || shape[1] < size
                    || shape[2] < size
                    || size == 0
                    || stride == 0
                {
                    return Err(bad(format!("pool {size} does not fit {shape:?}")));
                }
                vec![
                    shape[0],
                    (shape[1] - size) / stride + 1,
                    (shape[2] - size) / stride + 1,
                ]
            }
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::Dense { inputs, outputs } => {
                if shape != [inputs] {
                    return Err(bad(format!("dense expects [{inputs}], got {shape:?}")));
                }
                vec![outputs]
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => shape,
        };
        out.push(shape.clone());
    }
    Ok(out)
}

impl<T: Scalar> Network<T> {
    /// Build a network with seeded uniform fan-in initialisation,
    /// `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        Self::with_init(input_shape, layers, seed, Init::FanIn)
    }

    pub fn with_init(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        seed: u64,
        init: Init,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, layer) in layers.iter().enumerate() {
            if let Some((ws, bs)) = layer.param_shapes() {
                let (w_bound, b_bound) = match init {
                    Init::FanIn => {
                        let b = 1.0 / (layer.fan_in() as f64).sqrt();
                        (b, b)
                    }
                    Init::GlorotSigmoid => (
                        4.0 * (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt(),
                        0.0,
                    ),
                };
                let mut draw = |shape: Vec<usize>, bound: f64| {
                    let n = shape.iter().product();
                    let data = (0..n)
                        .map(|_| {
                            if bound > 0.0 {
                                T::of(rng.gen_range(-bound..bound))
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    Tensor::new(shape, data).expect("shape matches")
                };
                let w = draw(ws, w_bound);
                let b = draw(bs, b_bound);
                params.insert(weight_name(i), w);
                params.insert(bias_name(i), b);
            }
        }
        Self::from_parts(input_shape, layers, params)
    }

    /// Assemble from explicit parameters, validating the architecture.
    pub fn from_parts(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        params: ParamStore<T>,
    ) -> Result<Self> {
        infer_shapes(input_shape, &layers)?;
        let parametric = layers.iter().filter(|l| l.has_params()).count();
        if parametric < 2 {
            return Err(Error::invalid(
                "a network needs at least two parametric layers",
            ));
        }
        let (num_classes, feature_dim) = match layers.last() {
            Some(LayerSpec::Dense { inputs, outputs }) => (*outputs, *inputs),
            _ => return Err(Error::invalid("the final layer must be linear")),
        };
        for (i, layer) in layers.iter().enumerate() {
            if let Some((ws, bs)) = layer.param_shapes() {
                for (name, shape) in [(weight_name(i), ws), (bias_name(i), bs)] {
                    match params.get(&name) {
                        Some(t) if t.shape() == shape.as_slice() => {}
                        Some(t) => {
                            return Err(Error::invalid(format!(
                                "parameter {name} has shape {:?}, expected {shape:?}",
                                t.shape()
                            )))
                        }
                        None => return Err(Error::invalid(format!("missing parameter {name}"))),
                    }
                }
            }
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            num_classes,
            feature_dim,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Width `d_{L-1}` of the vector feeding the final linear layer.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Number of parametric layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| l.has_params()).count()
    }

    pub fn final_layer_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn final_weight(&self) -> &Tensor<T> {
        self.params
            .get(&weight_name(self.final_layer_index()))
            .expect("validated")
    }

    pub fn final_bias(&self) -> &Tensor<T> {
        self.params
            .get(&bias_name(self.final_layer_index()))
            .expect("validated")
    }

    pub fn has_conv(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Conv2d { .. }))
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    /// Graph of the network alone (no loss).
    pub fn graph(&self) -> NetGraph {
        self.graph_with(|_, _| None)
    }

    /// Graph of the network extended by `tail`, which receives the builder and
    /// the logits node and may append a scalar loss.
    pub fn graph_with(
        &self,
        tail: impl FnOnce(&mut GraphBuilder, NodeId) -> Option<NodeId>,
    ) -> NetGraph {
        let mut b = GraphBuilder::new();
        let input = b.input("x", &self.input_shape);
        let mut cur = input;
        let mut blocks = Vec::new();
        let mut last_conv = None;
        let mut penultimate = input;
        let mut final_weight = input;
        let mut final_bias = input;
        let last = self.layers.len() - 1;
        let mut seen_param = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.has_params() {
                seen_param = true;
                if i == last {
                    penultimate = cur;
                }
            }
            cur = match *layer {
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    let w = b.param(
                        &weight_name(i),
                        self.params.get(&weight_name(i)).expect("validated").shape(),
                    );
                    let bias = b.param(
                        &bias_name(i),
                        self.params.get(&bias_name(i)).expect("validated").shape(),
                    );
                    let c = b.conv2d(cur, w, stride, padding);
                    b.bias_add(c, bias)
                }
                LayerSpec::Dense { .. } => {
                    let w = b.param(
                        &weight_name(i),
                        self.params.get(&weight_name(i)).expect("validated").shape(),
                    );
                    let bias = b.param(
                        &bias_name(i),
                        self.params.get(&bias_name(i)).expect("validated").shape(),
                    );
                    if i == last {
                        final_weight = w;
                        final_bias = bias;
                    }
                    let m = b.matmul_t(cur, w);
                    b.bias_add(m, bias)
                }
                LayerSpec::Relu => b.unary(Op::Relu, cur),
                LayerSpec::Sigmoid => b.unary(Op::Sigmoid, cur),
                LayerSpec::MaxPool { size, stride } => b.max_pool2d(cur, size, stride),
                LayerSpec::Flatten => b.unary(Op::Flatten, cur),
            };
            let is_act = matches!(layer, LayerSpec::Relu | LayerSpec::Sigmoid);
            let prev_conv = i > 0 && matches!(self.layers[i - 1], LayerSpec::Conv2d { .. });
            if matches!(layer, LayerSpec::Conv2d { .. }) || (is_act && prev_conv) {
                last_conv = Some(cur);
            }
            // A block ends right before the next parametric layer.
            let next_has_params = self.layers.get(i + 1).is_none_or(|l| l.has_params());
            if seen_param && next_has_params {
                blocks.push(cur);
            }
        }
        let logits = cur;
        let loss = tail(&mut b, logits);
        NetGraph {
            graph: b.finish(),
            nodes: NetNodes {
                input,
                blocks,
                last_conv,
                penultimate,
                final_weight,
                final_bias,
                logits,
            },
            loss,
        }
    }

    /// Add the batch axis if `x` is a single sample.
    pub fn batched(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() == self.input_shape.as_slice() {
            let mut shape = vec![1];
            shape.extend_from_slice(&self.input_shape);
            x.clone().reshape(shape)
        } else if x.rank() == self.input_shape.len() + 1
            && &x.shape()[1..] == self.input_shape.as_slice()
        {
            Ok(x.clone())
        } else {
            Err(Error::shape(
                0,
                format!(
                    "input {:?} does not match {:?}",
                    x.shape(),
                    self.input_shape
                ),
            ))
        }
    }

    /// Logits for a batch `[B, ...]` (or a single sample), as `[B, N]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.graph();
        let mut pass = Pass::new(&g.graph, &self.params)?;
        pass.forward(vec![("x", self.batched(x)?)])?;
        Ok(pass.value(g.nodes.logits)?.clone())
    }

    /// Feed-forward inference `P = argmax(W_L y_feat^{L-1} + b_L)`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Prediction> {
        let logits = self.logits(x)?;
        if logits.shape()[0] != 1 {
            return Err(Error::invalid("predict takes a single sample"));
        }
        Ok(Prediction::from_logits(
            logits.data().iter().map(|v| v.as_f64()).collect(),
        ))
    }

    /// Predicted labels for every sample of `[B, ...]`, evaluated in
    /// fixed-size chunks (in parallel when threads are available).
    pub fn predict_labels(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        const CHUNK: usize = 128;
        let n = images.shape()[0];
        let per: usize = images.shape()[1..].iter().product();
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let parts: Result<Vec<Vec<usize>>> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + CHUNK).min(n);
                let mut shape = images.shape().to_vec();
                shape[0] = e - s;
                let chunk = Tensor::new(shape, images.data()[s * per..e * per].to_vec())?;
                let logits = self.logits(&chunk)?;
                Ok(logits.data().chunks(self.num_classes).map(argmax).collect())
            })
            .collect();
        Ok(parts?.into_iter().flatten().collect())
    }

    /// Activations `y_feat^l` of block `l` (1-based, `1 ≤ l ≤ L-1`).
    pub fn features(&self, x: &Tensor<T>, layer: usize) -> Result<Tensor<T>> {
        let depth = self.depth();
        if layer < 1 || layer >= depth {
            return Err(Error::OutOfRange {
                index: layer,
                limit: depth,
            });
        }
        let g = self.graph();
        let mut pass = Pass::new(&g.graph, &self.params)?;
        pass.forward(vec![("x", self.batched(x)?)])?;
        Ok(pass.value(g.nodes.blocks[layer - 1])?.clone())
    }
}

/// The desk-scale classifier: two 3×3 conv blocks (8 and 16 channels, ReLU,
/// 2×2 max-pool), a 64-wide dense ReLU layer and a final linear layer.
pub fn desk_cnn_layers(input_shape: &[usize], num_classes: usize) -> Result<Vec<LayerSpec>> {
    if input_shape.len() != 3 {
        return Err(Error::invalid("desk CNN expects [C, H, W] input"));
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    if h < 4 || w < 4 {
        return Err(Error::invalid("desk CNN expects at least 4x4 input"));
    }
    let flat = 16 * (h / 2 / 2) * (w / 2 / 2);
    Ok(vec![
        LayerSpec::Conv2d {
            in_ch: c,
            out_ch: 8,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2, stride: 2 },
        LayerSpec::Conv2d {
            in_ch: 8,
            out_ch: 16,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: flat,
            outputs: 64,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: 64,
            outputs: num_classes,
        },
    ])
}

pub fn desk_cnn<T: Scalar>(
    input_shape: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<Network<T>> {
    Network::new(
        input_shape,
        desk_cnn_layers(input_shape, num_classes)?,
        seed,
    )
}
