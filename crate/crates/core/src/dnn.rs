//! A small convolutional classifier with activation taps, exact input
//! gradients and outgoing-weight feature scores.
//!
//! Tensors are flat `Vec<f64>` in channel-planar order. Convolutions use valid
//! padding; max-pooling uses non-overlapping windows and drops any remainder.
//! A layer's "output" is what taps observe, so a tap on a `Relu` layer sees
//! post-nonlinearity values.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Image, LabeledDataset};
use crate::provenance::Provenance;
use crate::rng::{self, tags};

#[derive(Debug, Error)]
pub enum DnnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("unknown tap {0}")]
    UnknownTap(LayerId),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("layer {0} has all-zero outgoing weights")]
    DeadLayer(LayerId),
    #[error("layer {0} is not followed by a parametric layer")]
    NotFollowedByParametricLayer(LayerId),
    #[error("corrupt network artifact at byte {offset}: {message}")]
    Corrupt { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DnnError>;

/// Index of a layer in a [`NetworkSpec`]; activations are that layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub usize);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        stride: usize,
        out_channels: usize,
    },
    MaxPool {
        window: usize,
    },
    Dense {
        out: usize,
    },
    Relu,
    Softmax,
}

impl LayerSpec {
    fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

/// Tensor shape `(channels, height, width)`; dense vectors are `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn tuple(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn new(input: Shape, layers: Vec<LayerSpec>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input,
            layers,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// conv(5×5,6)-RELU-maxpool(2)-conv(5×5,16)-RELU-maxpool(2)-fc(120)-RELU-fc(84)-RELU-fc(K)-softmax
    pub fn lenet5(num_classes: usize) -> Self {
        use LayerSpec::*;
        Self::new(
            Shape::new(1, 28, 28),
            vec![
                Conv {
                    kernel: 5,
                    stride: 1,
                    out_channels: 6,
                },
                Relu,
                MaxPool { window: 2 },
                Conv {
                    kernel: 5,
                    stride: 1,
                    out_channels: 16,
                },
                Relu,
                MaxPool { window: 2 },
                Dense { out: 120 },
                Relu,
                Dense { out: 84 },
                Relu,
                Dense { out: num_classes },
                Softmax,
            ],
            num_classes,
        )
        .expect("valid LeNet-5 spec")
    }

    /// Reduced CIFAR-10 network with two pooling taps and a penultimate tap.
    pub fn cifar_small(num_classes: usize) -> Self {
        use LayerSpec::*;
        Self::new(
            Shape::new(3, 32, 32),
            vec![
                Conv {
                    kernel: 5,
                    stride: 1,
                    out_channels: 8,
                },
                Relu,
                MaxPool { window: 2 },
                Conv {
                    kernel: 5,
                    stride: 1,
                    out_channels: 16,
                },
                Relu,
                MaxPool { window: 2 },
                Dense { out: 64 },
                Relu,
                Dense { out: num_classes },
                Softmax,
            ],
            num_classes,
        )
        .expect("valid CIFAR spec")
    }

    /// Looks up a named architecture (`lenet5`, `cifar-small`).
    pub fn by_name(name: &str, num_classes: usize) -> Option<Self> {
        match name {
            "lenet5" | "lenet-5" => Some(Self::lenet5(num_classes)),
            "cifar-small" | "cifar_small" => Some(Self::cifar_small(num_classes)),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DnnError::InvalidSpec(m.to_string()));
        if self.input.is_empty() {
            return bad("empty input shape");
        }
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        match self.layers.last() {
            Some(LayerSpec::Softmax) => {}
            _ => return bad("final layer must be softmax"),
        }
        if self.layers[..self.layers.len() - 1].contains(&LayerSpec::Softmax) {
            return bad("softmax may only appear last");
        }
        if !self
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Relu | LayerSpec::MaxPool { .. }))
        {
            return bad("need at least one RELU or pooling layer to tap");
        }
        let shapes = self.try_output_shapes()?;
        let logits = shapes[shapes.len() - 2];
        if logits.len() != self.num_classes {
            return bad("softmax input width must equal the class count");
        }
        Ok(())
    }

    fn try_output_shapes(&self) -> Result<Vec<Shape>> {
        let mut s = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            s = match *layer {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    out_channels,
                } => {
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(DnnError::InvalidSpec(format!("layer {i}: zero conv parameter")));
                    }
                    if kernel > s.height || kernel > s.width {
                        return Err(DnnError::InvalidSpec(format!("layer {i}: kernel exceeds input")));
                    }
                    Shape::new(
                        out_channels,
                        (s.height - kernel) / stride + 1,
                        (s.width - kernel) / stride + 1,
                    )
                }
                LayerSpec::MaxPool { window } => {
                    if window == 0 || window > s.height || window > s.width {
                        return Err(DnnError::InvalidSpec(format!("layer {i}: bad pooling window")));
                    }
                    Shape::new(s.channels, s.height / window, s.width / window)
                }
                LayerSpec::Dense { out } => {
                    if out == 0 {
                        return Err(DnnError::InvalidSpec(format!("layer {i}: zero-width dense")));
                    }
                    Shape::new(out, 1, 1)
                }
                LayerSpec::Relu | LayerSpec::Softmax => s,
            };
            out.push(s);
        }
        Ok(out)
    }

    /// Output shape of every layer, in order.
    pub fn output_shapes(&self) -> Vec<Shape> {
        self.try_output_shapes().expect("validated spec")
    }

    /// Input shape of layer `i`.
    fn input_shape(&self, i: usize) -> Shape {
        if i == 0 {
            self.input
        } else {
            self.output_shapes()[i - 1]
        }
    }

    pub fn layer_width(&self, layer: LayerId) -> Option<usize> {
        self.output_shapes().get(layer.0).map(Shape::len)
    }

    /// The RELU (or other) layer feeding the final dense layer.
    pub fn penultimate(&self) -> Option<LayerId> {
        let last_dense = self
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense { .. }))?;
        last_dense.checked_sub(1).map(LayerId)
    }

    pub fn pool_layers(&self) -> Vec<LayerId> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::MaxPool { .. }))
            .map(|(i, _)| LayerId(i))
            .collect()
    }

    /// Max-pool outputs followed by the penultimate layer.
    pub fn default_taps(&self) -> Vec<LayerId> {
        let mut taps = self.pool_layers();
        if let Some(p) = self.penultimate() {
            if !taps.contains(&p) {
                taps.push(p);
            }
        }
        taps
    }

    /// Human-readable layer name, e.g. `pool2` or `fc3`.
    pub fn layer_name(&self, layer: LayerId) -> String {
        let Some(kind) = self.layers.get(layer.0) else {
            return format!("layer{}", layer.0);
        };
        let same = self.layers[..=layer.0]
            .iter()
            .filter(|l| std::mem::discriminant(*l) == std::mem::discriminant(kind))
            .count();
        let stem = match kind {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "pool",
            LayerSpec::Dense { .. } => "fc",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
        };
        format!("{stem}{same}")
    }

    fn param_shapes(&self, i: usize) -> Option<(usize, usize)> {
        let input = self.input_shape(i);
        match self.layers[i] {
            LayerSpec::Conv {
                kernel,
                out_channels,
                ..
            } => Some((out_channels * input.channels * kernel * kernel, out_channels)),
            LayerSpec::Dense { out } => Some((out * input.len(), out)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Params {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Class posterior over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior(Vec<f64>);

impl Posterior {
    pub fn from_probs(p: Vec<f64>) -> Self {
        Self(p)
    }
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
    pub fn get(&self, c: usize) -> f64 {
        self.0[c]
    }
    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
    /// Maximum a posteriori class (first index on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Tapped activation vectors keyed by layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerActivations(BTreeMap<LayerId, Vec<f64>>);

impl LayerActivations {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn insert(&mut self, layer: LayerId, z: Vec<f64>) {
        self.0.insert(layer, z);
    }
    pub fn get(&self, layer: LayerId) -> Option<&[f64]> {
        self.0.get(&layer).map(Vec::as_slice)
    }
    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.0.keys().copied()
    }
}

/// Scalar objective whose input gradient is requested.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// `-ln softmax(z)_t`
    CrossEntropy { target: usize },
    /// `max_{j≠t} z_j - z_t` over logits.
    LogitMargin { target: usize },
    /// `Σ_j w_j z_j` over logits.
    LogitCombination(Vec<f64>),
}

struct Trace {
    outputs: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy over each epoch's mini-batches (pre-update).
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Option<Params>>,
}

impl Network {
    /// Fan-in scaled uniform initialization, `U(-√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn new(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = rng::rng_for(seed, &[tags::INIT]);
        let params = (0..spec.layers.len())
            .map(|i| {
                spec.param_shapes(i).map(|(nw, nb)| {
                    let fan_in = nw / nb;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Params {
                        weights: (0..nw).map(|_| rng.random_range(-bound..bound)).collect(),
                        bias: vec![0.0; nb],
                    }
                })
            })
            .collect();
        Self { spec, params }
    }

    pub fn zeros(spec: NetworkSpec) -> Self {
        let params = (0..spec.layers.len())
            .map(|i| {
                spec.param_shapes(i).map(|(nw, nb)| Params {
                    weights: vec![0.0; nw],
                    bias: vec![0.0; nb],
                })
            })
            .collect();
        Self { spec, params }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    /// Weights and biases of a parametric layer. Conv weights are
    /// `[out][in][ky][kx]`, dense weights `[out][in]`.
    pub fn layer_params(&self, layer: LayerId) -> Option<(&[f64], &[f64])> {
        self.params
            .get(layer.0)?
            .as_ref()
            .map(|p| (p.weights.as_slice(), p.bias.as_slice()))
    }

    pub fn layer_params_mut(&mut self, layer: LayerId) -> Option<(&mut [f64], &mut [f64])> {
        self.params
            .get_mut(layer.0)?
            .as_mut()
            .map(|p| (p.weights.as_mut_slice(), p.bias.as_mut_slice()))
    }

    /// All parameters flattened in layer order (weights then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| p.weights.iter().chain(&p.bias).copied())
            .collect()
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        if x.shape() != self.spec.input.tuple() {
            return Err(DnnError::ShapeMismatch {
                expected: self.spec.input.tuple(),
                got: x.shape(),
            });
        }
        Ok(())
    }

    fn run(&self, x: &[f64]) -> Trace {
        let shapes = self.spec.output_shapes();
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.spec.layers.len());
        let mut pool_argmax = vec![Vec::new(); self.spec.layers.len()];
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let input: &[f64] = if i == 0 { x } else { &outputs[i - 1] };
            let in_shape = self.spec.input_shape(i);
            let out_shape = shapes[i];
            let out = match *layer {
                LayerSpec::Conv { kernel, stride, .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    conv_forward(input, in_shape, out_shape, kernel, stride, p)
                }
                LayerSpec::MaxPool { window } => {
                    let (o, idx) = pool_forward(input, in_shape, out_shape, window);
                    pool_argmax[i] = idx;
                    o
                }
                LayerSpec::Dense { out } => {
                    let p = self.params[i].as_ref().expect("dense params");
                    let n_in = input.len();
                    (0..out)
                        .map(|o| {
                            let w = &p.weights[o * n_in..(o + 1) * n_in];
                            p.bias[o] + dot(w, input)
                        })
                        .collect()
                }
                LayerSpec::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
                LayerSpec::Softmax => softmax(input),
            };
            outputs.push(out);
        }
        Trace {
            outputs,
            pool_argmax,
        }
    }

    /// Backpropagates `dlogits` (gradient w.r.t. the softmax input) to the
    /// input, optionally accumulating parameter gradients.
    fn backward(&self, x: &[f64], trace: &Trace, dlogits: &[f64], mut grads: Option<&mut [Option<Params>]>) -> Vec<f64> {
        let n = self.spec.layers.len();
        let shapes = self.spec.output_shapes();
        let mut g = dlogits.to_vec();
        for i in (0..n - 1).rev() {
            let input: &[f64] = if i == 0 { x } else { &trace.outputs[i - 1] };
            let in_shape = self.spec.input_shape(i);
            g = match self.spec.layers[i] {
                LayerSpec::Softmax => unreachable!("softmax is last"),
                LayerSpec::Relu => {
                    let out = &trace.outputs[i];
                    g.iter()
                        .zip(out)
                        .map(|(gi, &o)| if o > 0.0 { *gi } else { 0.0 })
                        .collect()
                }
                LayerSpec::MaxPool { .. } => {
                    let mut din = vec![0.0; in_shape.len()];
                    for (gi, &src) in g.iter().zip(&trace.pool_argmax[i]) {
                        din[src as usize] += gi;
                    }
                    din
                }
                LayerSpec::Dense { out } => {
                    let p = self.params[i].as_ref().expect("dense params");
                    let n_in = input.len();
                    let mut din = vec![0.0; n_in];
                    for o in 0..out {
                        let go = g[o];
                        if go == 0.0 {
                            continue;
                        }
                        axpy(go, &p.weights[o * n_in..(o + 1) * n_in], &mut din);
                    }
                    if let Some(gr) = grads.as_deref_mut() {
                        let gp = gr[i].as_mut().expect("dense grads");
                        for o in 0..out {
                            let go = g[o];
                            gp.bias[o] += go;
                            if go != 0.0 {
                                axpy(go, input, &mut gp.weights[o * n_in..(o + 1) * n_in]);
                            }
                        }
                    }
                    din
                }
                LayerSpec::Conv { kernel, stride, .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let gp = grads
                        .as_deref_mut()
                        .map(|gr| gr[i].as_mut().expect("conv grads"));
                    conv_backward(input, in_shape, shapes[i], kernel, stride, p, &g, gp)
                }
            };
        }
        g
    }

    /// Posterior and the requested tap activations.
    pub fn forward(&self, x: &Image, taps: &[LayerId]) -> Result<(Posterior, LayerActivations)> {
        self.check_input(x)?;
        if let Some(&bad) = taps.iter().find(|t| t.0 >= self.spec.layers.len()) {
            return Err(DnnError::UnknownTap(bad));
        }
        let mut trace = self.run(x.pixels());
        let mut acts = LayerActivations::new();
        for &t in taps {
            acts.insert(t, trace.outputs[t.0].clone());
        }
        let post = trace.outputs.pop().expect("nonempty network");
        Ok((Posterior(post), acts))
    }

    pub fn predict(&self, x: &Image) -> Result<Posterior> {
        Ok(self.forward(x, &[])?.0)
    }

    /// Decided (argmax) class.
    pub fn decide(&self, x: &Image) -> Result<usize> {
        Ok(self.predict(x)?.argmax())
    }

    /// Pre-softmax outputs.
    pub fn logits(&self, x: &Image) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.run(x.pixels());
        Ok(trace.outputs[trace.outputs.len() - 2].clone())
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.num_classes() {
            return Err(DnnError::ClassOutOfRange {
                class: c,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }

    fn objective_terms(&self, logits: &[f64], post: &[f64], obj: &Objective) -> Result<(f64, Vec<f64>)> {
        let k = logits.len();
        match obj {
            Objective::CrossEntropy { target } => {
                self.check_class(*target)?;
                let mut g = post.to_vec();
                g[*target] -= 1.0;
                let value = crate::numerics::log_sum_exp_unchecked(logits) - logits[*target];
                Ok((value, g))
            }
            Objective::LogitMargin { target } => {
                self.check_class(*target)?;
                let other = (0..k)
                    .filter(|&j| j != *target)
                    .fold(None::<usize>, |best, j| match best {
                        Some(b) if logits[b] >= logits[j] => Some(b),
                        _ => Some(j),
                    })
                    .expect("at least two classes");
                let mut g = vec![0.0; k];
                g[other] += 1.0;
                g[*target] -= 1.0;
                Ok((logits[other] - logits[*target], g))
            }
            Objective::LogitCombination(w) => {
                if w.len() != k {
                    return Err(DnnError::ClassOutOfRange {
                        class: w.len(),
                        classes: k,
                    });
                }
                Ok((dot(w, logits), w.clone()))
            }
        }
    }

    /// Value of `obj` at `x`.
    pub fn objective_value(&self, x: &Image, obj: &Objective) -> Result<f64> {
        self.check_input(x)?;
        let trace = self.run(x.pixels());
        let n = trace.outputs.len();
        Ok(self.objective_terms(&trace.outputs[n - 2], &trace.outputs[n - 1], obj)?.0)
    }

    /// Exact gradient of `obj` with respect to the input pixels.
    pub fn input_gradient(&self, x: &Image, obj: &Objective) -> Result<Vec<f64>> {
        Ok(self.value_and_input_gradient(x, obj)?.1)
    }

    /// Objective value, its input gradient, and the posterior at `x`.
    pub fn value_and_input_gradient(&self, x: &Image, obj: &Objective) -> Result<(f64, Vec<f64>, Posterior)> {
        self.check_input(x)?;
        let trace = self.run(x.pixels());
        let n = trace.outputs.len();
        let (value, dlogits) = self.objective_terms(&trace.outputs[n - 2], &trace.outputs[n - 1], obj)?;
        let grad = self.backward(x.pixels(), &trace, &dlogits, None);
        Ok((value, grad, Posterior(trace.outputs[n - 1].clone())))
    }

    fn zero_grads(&self) -> Vec<Option<Params>> {
        self.params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| Params {
                    weights: vec![0.0; p.weights.len()],
                    bias: vec![0.0; p.bias.len()],
                })
            })
            .collect()
    }

    fn sgd_step(&mut self, grads: &[Option<Params>], scale: f64) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let (Some(p), Some(g)) = (p.as_mut(), g.as_ref()) {
                axpy(-scale, &g.weights, &mut p.weights);
                axpy(-scale, &g.bias, &mut p.bias);
            }
        }
    }

    /// Mean cross-entropy of a dataset.
    pub fn mean_loss(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(DnnError::EmptyDataset);
        }
        let mut total = 0.0;
        for (x, y) in data.iter() {
            total += self.objective_value(x, &Objective::CrossEntropy { target: y })?;
        }
        Ok(total / data.len() as f64)
    }

    /// Fraction of samples whose argmax decision equals the label.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(DnnError::EmptyDataset);
        }
        let mut correct = 0usize;
        for (x, y) in data.iter() {
            if self.decide(x)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Mini-batch SGD on cross-entropy; the receiver is left untouched.
    pub fn train(&self, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
        if data.is_empty() {
            return Err(DnnError::EmptyDataset);
        }
        if let Some(&y) = data.labels().iter().find(|&&y| y >= self.num_classes()) {
            return Err(DnnError::ClassOutOfRange {
                class: y,
                classes: self.num_classes(),
            });
        }
        for x in data.images() {
            self.check_input(x)?;
        }
        let batch = cfg.batch_size.max(1);
        let mut net = self.clone();
        let mut report = TrainReport::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..cfg.epochs {
            let mut rng = rng::rng_for(cfg.seed, &[tags::SHUFFLE, epoch as u64]);
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(batch) {
                let mut grads = net.zero_grads();
                for &idx in chunk {
                    let x = data.images()[idx].pixels();
                    let y = data.labels()[idx];
                    let trace = net.run(x);
                    let n = trace.outputs.len();
                    let logits = &trace.outputs[n - 2];
                    loss_sum += crate::numerics::log_sum_exp_unchecked(logits) - logits[y];
                    let mut dl = trace.outputs[n - 1].clone();
                    dl[y] -= 1.0;
                    net.backward(x, &trace, &dl, Some(&mut grads));
                }
                if cfg.learning_rate != 0.0 {
                    net.sgd_step(&grads, cfg.learning_rate / chunk.len() as f64);
                }
            }
            report.epoch_losses.push(loss_sum / data.len() as f64);
        }
        Ok((net, report))
    }

    /// Per-feature outgoing weight magnitude of `layer`, normalized by its maximum.
    ///
    /// Pass-through layers (RELU, max-pool) between `layer` and the next
    /// parametric layer are followed: a feature routed into a pooling window
    /// inherits the score of the pooled feature it feeds.
    pub fn outgoing_weight_scores(&self, layer: LayerId) -> Result<Vec<f64>> {
        let n = self.spec.layers.len();
        if layer.0 >= n {
            return Err(DnnError::UnknownTap(layer));
        }
        let shapes = self.spec.output_shapes();
        // route[i] = index in the current layer's output that feature i reaches.
        let mut route: Vec<usize> = (0..shapes[layer.0].len()).collect();
        let mut j = layer.0 + 1;
        while j < n && !self.spec.layers[j].is_parametric() {
            match self.spec.layers[j] {
                LayerSpec::Relu => {}
                LayerSpec::MaxPool { window } => {
                    let s_in = shapes[j - 1];
                    let s_out = shapes[j];
                    for r in &mut route {
                        let c = *r / (s_in.height * s_in.width);
                        let y = (*r / s_in.width) % s_in.height;
                        let x = *r % s_in.width;
                        let (py, px) = (y / window, x / window);
                        *r = if py < s_out.height && px < s_out.width {
                            (c * s_out.height + py) * s_out.width + px
                        } else {
                            usize::MAX // dropped by the pooling remainder
                        };
                    }
                }
                _ => return Err(DnnError::NotFollowedByParametricLayer(layer)),
            }
            j += 1;
        }
        if j >= n {
            return Err(DnnError::NotFollowedByParametricLayer(layer));
        }
        let sums = self.outgoing_abs_sums(j);
        let scores: Vec<f64> = route
            .iter()
            .map(|&r| if r == usize::MAX { 0.0 } else { sums[r] })
            .collect();
        let max = scores.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(DnnError::DeadLayer(layer));
        }
        Ok(scores.iter().map(|s| s / max).collect())
    }

    /// Σ|w| leaving each input feature of parametric layer `j`.
    fn outgoing_abs_sums(&self, j: usize) -> Vec<f64> {
        let p = self.params[j].as_ref().expect("parametric layer");
        let in_shape = self.spec.input_shape(j);
        let n_in = in_shape.len();
        let mut sums = vec![0.0; n_in];
        match self.spec.layers[j] {
            LayerSpec::Dense { out } => {
                for o in 0..out {
                    for (s, w) in sums.iter_mut().zip(&p.weights[o * n_in..(o + 1) * n_in]) {
                        *s += w.abs();
                    }
                }
            }
            LayerSpec::Conv {
                kernel,
                stride,
                out_channels,
            } => {
                let out_shape = self.spec.output_shapes()[j];
                let (ih, iw) = (in_shape.height, in_shape.width);
                for oc in 0..out_channels {
                    for ic in 0..in_shape.channels {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let w = p.weights[((oc * in_shape.channels + ic) * kernel + ky) * kernel + kx].abs();
                                for oy in 0..out_shape.height {
                                    for ox in 0..out_shape.width {
                                        let (y, x) = (oy * stride + ky, ox * stride + kx);
                                        sums[(ic * ih + y) * iw + x] += w;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            _ => unreachable!("parametric layer"),
        }
        sums
    }

    // -- persistence --------------------------------------------------------

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian f32 parameters).
    pub fn save(&self, manifest_path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        let blob_path = manifest_path.with_extension("bin");
        let mut blob = Vec::with_capacity(self.param_count() * 4);
        let mut layout = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            if let Some(p) = p {
                let w_off = blob.len();
                for v in &p.weights {
                    blob.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                let b_off = blob.len();
                for v in &p.bias {
                    blob.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                layout.push(BlobEntry {
                    layer: i,
                    name: self.spec.layer_name(LayerId(i)),
                    weights_offset: w_off,
                    weights_count: p.weights.len(),
                    bias_offset: b_off,
                    bias_count: p.bias.len(),
                });
            }
        }
        let manifest = NetworkManifest {
            format: NETWORK_FORMAT.to_string(),
            spec: self.spec.clone(),
            blob: BlobInfo {
                file: blob_path
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                dtype: "f32le".into(),
                len_bytes: blob.len(),
                layers: layout,
            },
            provenance: provenance.cloned(),
        };
        fs::write(&blob_path, &blob)?;
        let mut f = fs::File::create(manifest_path)?;
        f.write_all(&serde_json::to_vec_pretty(&manifest)?)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = NetworkManifest::read(manifest_path)?;
        let blob = fs::read(manifest.blob_path(manifest_path))?;
        Self::from_manifest(manifest, &blob)
    }

    pub fn from_manifest(manifest: NetworkManifest, blob: &[u8]) -> Result<Self> {
        if manifest.format != NETWORK_FORMAT {
            return Err(DnnError::Corrupt {
                offset: 0,
                message: format!("unknown format {:?}", manifest.format),
            });
        }
        let spec = manifest.spec.clone();
        spec.validate()?;
        if blob.len() != manifest.blob.len_bytes {
            return Err(DnnError::Corrupt {
                offset: blob.len(),
                message: format!("blob holds {} bytes, manifest declares {}", blob.len(), manifest.blob.len_bytes),
            });
        }
        let mut net = Network::zeros(spec);
        let read_f32s = |off: usize, count: usize| -> Result<Vec<f64>> {
            let end = off + count * 4;
            let bytes = blob.get(off..end).ok_or(DnnError::Corrupt {
                offset: blob.len().min(end),
                message: format!("parameter block [{off}, {end}) past end of blob"),
            })?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect())
        };
        let expected: Vec<usize> = (0..net.params.len()).filter(|&i| net.params[i].is_some()).collect();
        let got: Vec<usize> = manifest.blob.layers.iter().map(|e| e.layer).collect();
        if expected != got {
            return Err(DnnError::Corrupt {
                offset: 0,
                message: "blob layout does not match spec".into(),
            });
        }
        for e in &manifest.blob.layers {
            let p = net.params[e.layer].as_mut().expect("checked");
            if e.weights_count != p.weights.len() || e.bias_count != p.bias.len() {
                return Err(DnnError::Corrupt {
                    offset: e.weights_offset,
                    message: format!("layer {} parameter counts disagree with spec", e.layer),
                });
            }
            p.weights = read_f32s(e.weights_offset, e.weights_count)?;
            p.bias = read_f32s(e.bias_offset, e.bias_count)?;
        }
        if let Some((i, _)) = net.flat_params().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DnnError::Corrupt {
                offset: i * 4,
                message: "non-finite parameter".into(),
            });
        }
        Ok(net)
    }

    /// Rounds every parameter through f32, matching what [`Network::save`] persists.
    pub fn quantized_f32(&self) -> Network {
        let mut net = self.clone();
        for p in net.params.iter_mut().flatten() {
            for v in p.weights.iter_mut().chain(p.bias.iter_mut()) {
                *v = f64::from(*v as f32);
            }
        }
        net
    }
}

pub const NETWORK_FORMAT: &str = "ada-network/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub layer: usize,
    pub name: String,
    /// Byte offsets into the blob.
    pub weights_offset: usize,
    pub weights_count: usize,
    pub bias_offset: usize,
    pub bias_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    pub dtype: String,
    pub len_bytes: usize,
    pub layers: Vec<BlobEntry>,
}

/// JSON manifest accompanying the binary parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkManifest {
    pub format: String,
    pub spec: NetworkSpec,
    pub blob: BlobInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl NetworkManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn blob_path(&self, manifest_path: &Path) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&self.blob.file)
    }
}

// -- kernels ----------------------------------------------------------------

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn conv_forward(input: &[f64], is: Shape, os: Shape, k: usize, stride: usize, p: &Params) -> Vec<f64> {
    let mut out = vec![0.0; os.len()];
    let plane = os.height * os.width;
    for oc in 0..os.channels {
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        dst.fill(p.bias[oc]);
        for ic in 0..is.channels {
            let src = &input[ic * is.height * is.width..(ic + 1) * is.height * is.width];
            for ky in 0..k {
                for kx in 0..k {
                    let w = p.weights[((oc * is.channels + ic) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    for oy in 0..os.height {
                        let row = &src[(oy * stride + ky) * is.width..];
                        let drow = &mut dst[oy * os.width..(oy + 1) * os.width];
                        if stride == 1 {
                            axpy(w, &row[kx..kx + os.width], drow);
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d += w * row[ox * stride + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    is: Shape,
    os: Shape,
    k: usize,
    stride: usize,
    p: &Params,
    g: &[f64],
    mut gp: Option<&mut Params>,
) -> Vec<f64> {
    let mut din = vec![0.0; is.len()];
    let plane = os.height * os.width;
    let iplane = is.height * is.width;
    for oc in 0..os.channels {
        let gplane = &g[oc * plane..(oc + 1) * plane];
        if let Some(gp) = gp.as_deref_mut() {
            gp.bias[oc] += gplane.iter().sum::<f64>();
        }
        for ic in 0..is.channels {
            let src = &input[ic * iplane..(ic + 1) * iplane];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((oc * is.channels + ic) * k + ky) * k + kx;
                    let w = p.weights[widx];
                    let mut acc = 0.0;
                    for oy in 0..os.height {
                        let base = (oy * stride + ky) * is.width;
                        let grow = &gplane[oy * os.width..(oy + 1) * os.width];
                        if stride == 1 {
                            let srow = &src[base + kx..base + kx + os.width];
                            acc += dot(grow, srow);
                            let drow = &mut din[ic * iplane + base + kx..ic * iplane + base + kx + os.width];
                            axpy(w, grow, drow);
                        } else {
                            for (ox, &gv) in grow.iter().enumerate() {
                                let at = base + ox * stride + kx;
                                acc += gv * src[at];
                                din[ic * iplane + at] += w * gv;
                            }
                        }
                    }
                    if let Some(gp) = gp.as_deref_mut() {
                        gp.weights[widx] += acc;
                    }
                }
            }
        }
    }
    din
}

fn pool_forward(input: &[f64], is: Shape, os: Shape, window: usize) -> (Vec<f64>, Vec<u32>) {
    let mut out = Vec::with_capacity(os.len());
    let mut idx = Vec::with_capacity(os.len());
    for c in 0..os.channels {
        for py in 0..os.height {
            for px in 0..os.width {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0usize;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = (c * is.height + py * window + dy) * is.width + px * window + dx;
                        if input[i] > best {
                            best = input[i];
                            at = i;
                        }
                    }
                }
                out.push(best);
                idx.push(at as u32);
            }
        }
    }
    (out, idx)
}
