//! Dense feed-forward networks with exact reverse-mode gradients and Adam.
//!
//! Inputs are batches laid out row-per-sample. A forward pass returns a
//! [`Tape`] holding each layer's input and output; replaying it through
//! [`Network::backward`] accumulates parameter gradients and returns the
//! gradient with respect to the network input, which is how gradients are
//! chained between the critic, actor and embedding networks.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `delta` by the activation derivative, expressed through the output.
    fn backprop(self, output: &Array2<f64>, delta: &mut Array2<f64>) {
        match self {
            Activation::Relu => delta.zip_mut_with(output, |d, &y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Tanh => delta.zip_mut_with(output, |d, &y| *d *= 1.0 - y * y),
            Activation::Identity => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs × outputs`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// Gradient (or moment) storage shaped like a network's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(layers: &[Dense]) -> Self {
        Self {
            weight: layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            bias: layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.scaled_add(scale, b);
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.weight.iter_mut().for_each(|w| w.fill(value));
        self.bias.iter_mut().for_each(|b| b.fill(value));
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::with_rate(1e-3)
    }
}

impl OptimizerConfig {
    pub fn with_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: Gradients,
    pub second: Gradients,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Dense>,
    grads: Gradients,
    adam: AdamState,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    #[serde(skip)]
    version: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            grads: self.grads.clone(),
            adam: self.adam.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.grads == other.grads && self.adam == other.adam
    }
}

/// Activation record of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    network: u64,
    version: u64,
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("network has layers")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }
}

impl Network {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer list"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Dimension {
                    context: "consecutive layers",
                    expected: pair[0].outputs(),
                    got: pair[1].inputs(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(Error::Dimension {
                    context: "layer bias",
                    expected: l.outputs(),
                    got: l.bias.len(),
                });
            }
        }
        let grads = Gradients::zeros_like(&layers);
        Ok(Self {
            adam: AdamState {
                step: 0,
                first: grads.clone(),
                second: grads.clone(),
            },
            grads,
            layers,
            id: fresh_id(),
            version: 0,
        })
    }

    /// Multilayer perceptron over `sizes` with fan-in uniform initialization
    /// `U(−1/√fan_in, 1/√fan_in)`. `activations.len()` must be `sizes.len() − 1`.
    pub fn mlp<R: Rng + ?Sized>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::Config(format!(
                "mlp needs one activation per layer: {} sizes, {} activations",
                sizes.len(),
                activations.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..=bound)),
                    bias: Array1::from_shape_simple_fn(w[1], || rng.random_range(-bound..=bound)),
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Re-draws the final layer from `U(−scale, scale)`.
    pub fn scale_final_layer<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        let last = self.layers.last_mut().expect("network has layers");
        last.weight.mapv_inplace(|_| rng.random_range(-scale..=scale));
        last.bias.mapv_inplace(|_| rng.random_range(-scale..=scale));
        self.version += 1;
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the parameters; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    pub fn gradients(&self) -> &Gradients {
        &self.grads
    }

    pub fn optimizer_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros_like(&self.layers)
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    /// Adds `scale · grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        self.grads.add_scaled(grads, scale);
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Dimension {
                context: "flat parameters",
                expected: self.param_count(),
                got: values.len(),
            });
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
        self.version += 1;
        Ok(())
    }

    /// FNV-1a hash over the bit patterns of all parameters.
    pub fn checksum(&self) -> u64 {
        self.params_flat().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            v.to_bits()
                .to_le_bytes()
                .iter()
                .fold(h, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
        })
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Tape> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for layer in &self.layers {
            let mut z = current.dot(&layer.weight);
            z += &layer.bias;
            layer.activation.apply(&mut z);
            inputs.push(current);
            current = z.clone();
            outputs.push(z);
        }
        Ok(Tape {
            network: self.id,
            version: self.version,
            inputs,
            outputs,
        })
    }

    /// Forward pass without keeping the activation record.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut current = x.dot(&self.layers[0].weight);
        current += &self.layers[0].bias;
        self.layers[0].activation.apply(&mut current);
        for layer in &self.layers[1..] {
            let mut z = current.dot(&layer.weight);
            z += &layer.bias;
            layer.activation.apply(&mut z);
            current = z;
        }
        Ok(current)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    fn check_tape(&self, tape: &Tape, output_grad: &Array2<f64>) -> Result<()> {
        if tape.network != self.id || tape.version != self.version {
            return Err(Error::StaleTape);
        }
        if output_grad.dim() != tape.output().dim() {
            return Err(Error::Dimension {
                context: "output gradient",
                expected: tape.output().len(),
                got: output_grad.len(),
            });
        }
        Ok(())
    }

    fn backprop(&self, tape: &Tape, output_grad: &Array2<f64>, mut sink: Option<&mut Gradients>) -> Result<Array2<f64>> {
        self.check_tape(tape, output_grad)?;
        let mut delta = output_grad.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&tape.outputs[l], &mut delta);
            if let Some(g) = sink.as_deref_mut() {
                general_mat_mul(1.0, &tape.inputs[l].t(), &delta, 1.0, &mut g.weight[l]);
                g.bias[l] += &delta.sum_axis(Axis(0));
            }
            delta = delta.dot(&layer.weight.t());
        }
        Ok(delta)
    }

    /// Accumulates parameter gradients into this network and returns the input gradient.
    pub fn backward(&mut self, tape: &Tape, output_grad: &Array2<f64>) -> Result<Array2<f64>> {
        let mut grads = std::mem::replace(&mut self.grads, Gradients { weight: vec![], bias: vec![] });
        let out = self.backprop(tape, output_grad, Some(&mut grads));
        self.grads = grads;
        out
    }

    /// Like [`Network::backward`] but accumulates into an external buffer.
    pub fn backward_into(&self, tape: &Tape, output_grad: &Array2<f64>, grads: &mut Gradients) -> Result<Array2<f64>> {
        self.backprop(tape, output_grad, Some(grads))
    }

    /// Input gradient only; parameter accumulators are untouched.
    pub fn input_gradient(&self, tape: &Tape, output_grad: &Array2<f64>) -> Result<Array2<f64>> {
        self.backprop(tape, output_grad, None)
    }

    /// Adam update from the accumulated gradients, which are then zeroed.
    pub fn optimizer_step(&mut self, cfg: &OptimizerConfig) {
        let AdamState { step, first, second } = &mut self.adam;
        *step += 1;
        let t = *step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let params = layer.weight.iter_mut().chain(layer.bias.iter_mut());
            let grads = self.grads.weight[l].iter().chain(self.grads.bias[l].iter());
            let m = first.weight[l].iter_mut().chain(first.bias[l].iter_mut());
            let v = second.weight[l].iter_mut().chain(second.bias[l].iter_mut());
            for (((p, &g), m), v) in params.zip(grads).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.grads.fill(0.0);
        self.version += 1;
    }

    /// `self ← blend·online + (1 − blend)·self`, elementwise over parameters.
    pub fn soft_update_from(&mut self, online: &Network, blend: f64) {
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.weight.zip_mut_with(&o.weight, |a, &b| *a = blend * b + (1.0 - blend) * *a);
            t.bias.zip_mut_with(&o.bias, |a, &b| *a = blend * b + (1.0 - blend) * *a);
        }
        self.version += 1;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Network = serde_json::from_str(text)?;
        let mut layers = net.layers;
        let checked = Network::from_layers(std::mem::take(&mut layers))?;
        Ok(Network {
            grads: net.grads,
            adam: net.adam,
            ..checked
        })
    }
}
