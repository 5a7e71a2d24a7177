//! Shared-weight fully connected embedding network, contrastive loss and its
//! exact gradient.
//!
//! Both branches of the Siamese pair are the same [`SiameseNet`] value applied
//! twice, so weight sharing is structural: there is one copy of every
//! parameter, and the gradient of a pair loss is the sum of the two branch
//! contributions.

mod io;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use io::{load_net, read_net, save_net, write_net, MODEL_FORMAT_VERSION};
pub use train::{train, TrainConfig, TrainHistory};

/// Default layer widths: 2622-d input, three 2048-unit layers.
pub const DEFAULT_LAYER_DIMS: [usize; 4] = [2622, 2048, 2048, 2048];

/// Pair label. `Same` is encoded as 0 and `Different` as 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairLabel {
    Same,
    Different,
}

impl PairLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            PairLabel::Same => 0,
            PairLabel::Different => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(PairLabel::Same),
            1 => Some(PairLabel::Different),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    // Subgradient 0 at the ReLU kink.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// A dense layer `act(W x + b)` with `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Dense {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        if weights.len() != inputs * outputs {
            return Err(Error::DimensionMismatch {
                expected: inputs * outputs,
                actual: weights.len(),
            });
        }
        if bias.len() != outputs {
            return Err(Error::DimensionMismatch {
                expected: outputs,
                actual: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "layer parameters must be finite".into(),
            ));
        }
        Ok(Dense {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// `(outputs, inputs)`
    pub fn weight_shape(&self) -> (usize, usize) {
        (self.outputs, self.inputs)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn pre_activation(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| dot(row, input) + b),
        );
    }
}

/// The embedding map shared by both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseNet {
    layers: Vec<Dense>,
}

impl SiameseNet {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "a network needs at least one layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].outputs,
                    actual: pair[1].inputs,
                });
            }
        }
        Ok(SiameseNet { layers })
    }

    /// All-zero network with ReLU hidden layers and a linear output layer.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        let n = layer_dims.len() - 1;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                Dense::new(
                    w[0],
                    w[1],
                    vec![0.0; w[0] * w[1]],
                    vec![0.0; w[1]],
                    default_activation(l, n),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        SiameseNet::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// `[d_in, h1, ..., h_out]`
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Embeds one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.pre_activation(&current, &mut next);
            for v in &mut next {
                *v = layer.activation.apply(*v);
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for layer in &self.layers {
            let mut z = Vec::new();
            layer.pre_activation(activations.last().unwrap(), &mut z);
            activations.push(z.iter().map(|&v| layer.activation.apply(v)).collect());
            pre.push(z);
        }
        Trace { activations, pre }
    }

    /// Euclidean distance between the embeddings of `x1` and `x2`.
    pub fn distance(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        Ok(euclidean(&self.forward(x1)?, &self.forward(x2)?))
    }

    /// Contrastive loss of one pair and its gradient with respect to every
    /// parameter.
    pub fn backward(
        &self,
        x1: &[f64],
        x2: &[f64],
        label: PairLabel,
        margin: f64,
    ) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(self);
        let loss = self.accumulate_gradients(x1, x2, label, margin, &mut grads)?;
        Ok((loss, grads))
    }

    /// Adds the pair's gradient into `grads` and returns its loss.
    pub fn accumulate_gradients(
        &self,
        x1: &[f64],
        x2: &[f64],
        label: PairLabel,
        margin: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        self.check_input(x1)?;
        self.check_input(x2)?;
        let t1 = self.forward_trace(x1);
        let t2 = self.forward_trace(x2);
        let e: Vec<f64> = t1
            .output()
            .iter()
            .zip(t2.output())
            .map(|(a, b)| a - b)
            .collect();
        let d = norm(&e);
        let loss = contrastive_loss(d, label, margin);

        // dL/de where e = G(x1) - G(x2). For Same pairs L = |e|^2 / 2, so the
        // gradient is e itself and is smooth at d = 0. For Different pairs the
        // hinge contributes -(m - d) * e / d while d < m, and 0 at d = 0.
        let scale = match label {
            PairLabel::Same => 1.0,
            PairLabel::Different if d < margin && d > 0.0 => -(margin - d) / d,
            PairLabel::Different => 0.0,
        };
        if scale == 0.0 || e.iter().all(|&v| v == 0.0) {
            return Ok(loss);
        }
        let grad_e: Vec<f64> = e.iter().map(|v| scale * v).collect();
        self.backprop_branch(&t1, grad_e.clone(), grads);
        self.backprop_branch(&t2, grad_e.into_iter().map(|v| -v).collect(), grads);
        Ok(loss)
    }

    fn backprop_branch(&self, trace: &Trace, mut upstream: Vec<f64>, grads: &mut Gradients) {
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let delta: Vec<f64> = upstream
                .iter()
                .zip(&trace.pre[l])
                .map(|(g, &z)| g * layer.activation.derivative(z))
                .collect();
            let input = &trace.activations[l];
            let lg = &mut grads.layers[l];
            for (db, dv) in lg.bias.iter_mut().zip(&delta) {
                *db += dv;
            }
            for (row, &dv) in lg.weights.chunks_exact_mut(layer.inputs).zip(&delta) {
                if dv != 0.0 {
                    axpy(dv, input, row);
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (row, &dv) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                    if dv != 0.0 {
                        axpy(dv, row, &mut prev);
                    }
                }
                upstream = prev;
            }
        }
    }

    /// `params -= step * grads`
    pub fn apply_gradients(&mut self, grads: &Gradients, step: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            axpy(-step, &g.weights, &mut layer.weights);
            axpy(-step, &g.bias, &mut layer.bias);
        }
    }
}

struct Trace {
    /// Layer inputs; the last entry is the network output.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

/// Per-layer gradient buffers with the same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    /// Row-major `outputs x inputs`, like [`Dense::weights`].
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &SiameseNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|v| v == 0.0)
    }
}

fn default_activation(layer: usize, n_layers: usize) -> Activation {
    if layer + 1 == n_layers {
        Activation::Identity
    } else {
        Activation::Relu
    }
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "layer_dims needs an input and at least one layer, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer widths must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

/// Glorot-uniform initialization: every weight of a layer with fan-in `a` and
/// fan-out `b` is drawn from `U(-s, s)` with `s = sqrt(6 / (a + b))`; biases
/// start at zero. Hidden layers use ReLU, the output layer is linear.
pub fn init_net(layer_dims: &[usize], rng_seed: u64) -> Result<SiameseNet> {
    check_dims(layer_dims)?;
    let mut rng = rng::seeded(rng_seed);
    let n = layer_dims.len() - 1;
    let layers = layer_dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-s..s))
                .collect();
            Dense::new(
                fan_in,
                fan_out,
                weights,
                vec![0.0; fan_out],
                default_activation(l, n),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    SiameseNet::from_layers(layers)
}

/// `((1 - y) d^2 + y max(0, m - d)^2) / 2` with `y = 0` for same-identity pairs.
pub fn contrastive_loss(d: f64, label: PairLabel, margin: f64) -> f64 {
    debug_assert!(d >= 0.0, "distance must be nonnegative");
    debug_assert!(margin > 0.0, "margin must be positive");
    match label {
        PairLabel::Same => d * d / 2.0,
        PairLabel::Different => {
            let h = (margin - d).max(0.0);
            h * h / 2.0
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// Four independent accumulators so the loop vectorizes; the summation order
// is fixed, so results are still deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
