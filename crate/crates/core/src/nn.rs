//! Dense feed-forward networks with exact reverse-mode gradients, and Adam.
//!
//! Parameters live in one flat [`ParamVector`]. The layout is layer-major:
//! for each layer in order, the weight matrix row-major (`output × input`)
//! followed by the bias vector. All arithmetic is `f64`.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::LeakyRelu(alpha) => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
            Activation::Sigmoid => crate::distributions::sigmoid(z),
        }
    }

    /// Derivative at pre-activation `z`, given the activation value `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu(alpha) => {
                if z > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn num_params(&self) -> usize {
        self.output * self.input + self.output
    }
}

/// Flat parameter vector in the layer-major layout described above.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: ParamVector,
}

impl DenseNet {
    /// A network with the given layers and all parameters zero.
    pub fn zeros(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("network needs at least one layer");
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].output != pair[1].input {
                return invalid(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    pair[0].output,
                    l + 1,
                    pair[1].input
                ));
            }
        }
        if layers.iter().any(|s| s.input == 0 || s.output == 0) {
            return invalid("layer dimensions must be positive");
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for s in &layers {
            offsets.push(total);
            total += s.num_params();
        }
        Ok(DenseNet { layers, offsets, params: ParamVector::zeros(total) })
    }

    /// Builds `sizes[0] → sizes[1] → … → sizes[n]` with `hidden` activations
    /// between layers and `output` on the last. Weights are drawn from
    /// `uniform(−s, s)`, `s = sqrt(6 / (fan_in + fan_out))`; biases start at 0.
    pub fn glorot<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return invalid("need at least input and output sizes");
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| LayerShape {
                input: sizes[l],
                output: sizes[l + 1],
                activation: if l + 1 == n { output } else { hidden },
            })
            .collect();
        let mut net = DenseNet::zeros(layers)?;
        for l in 0..n {
            let s = net.layers[l];
            let bound = (6.0 / (s.input + s.output) as f64).sqrt();
            let off = net.offsets[l];
            for w in &mut net.params[off..off + s.output * s.input] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        ensure_len("parameter vector", params.len(), self.params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Index range of layer `l`'s parameters (weights then bias).
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.offsets[l];
        start..start + self.layers[l].num_params()
    }

    pub fn zero_layer(&mut self, l: usize) {
        let range = self.layer_range(l);
        self.params[range].iter_mut().for_each(|p| *p = 0.0);
    }

    fn layer_slices(&self, l: usize) -> (&[f64], &[f64]) {
        let s = self.layers[l];
        let off = self.offsets[l];
        let w = &self.params[off..off + s.output * s.input];
        let b = &self.params[off + s.output * s.input..off + s.num_params()];
        (w, b)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        ensure_len("network input", input.len(), self.input_dim())?;
        let mut act = input.to_vec();
        for l in 0..self.layers.len() {
            let s = self.layers[l];
            let (w, b) = self.layer_slices(l);
            act = (0..s.output)
                .map(|o| s.activation.apply(dot(&w[o * s.input..(o + 1) * s.input], &act) + b[o]))
                .collect();
        }
        Ok(act)
    }

    /// Pre-activations of every layer at `input`.
    pub fn pre_activations(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        ensure_len("network input", input.len(), self.input_dim())?;
        Ok(self.forward_cached(input).0)
    }

    /// Forward pass keeping every pre-activation and activation.
    fn forward_cached(&self, input: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for l in 0..self.layers.len() {
            let s = self.layers[l];
            let (w, b) = self.layer_slices(l);
            let prev = &acts[l];
            let z: Vec<f64> = (0..s.output).map(|o| dot(&w[o * s.input..(o + 1) * s.input], prev) + b[o]).collect();
            let a = z.iter().map(|&v| s.activation.apply(v)).collect();
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    /// Reverse-mode product: returns `cotangentᵀ ∂out/∂input` and adds
    /// `cotangentᵀ ∂out/∂params` into `param_grad`. Also returns the outputs.
    pub fn vjp_accumulate(
        &self,
        input: &[f64],
        cotangent: &[f64],
        param_grad: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        ensure_len("network input", input.len(), self.input_dim())?;
        ensure_len("cotangent", cotangent.len(), self.output_dim())?;
        ensure_len("parameter gradient", param_grad.len(), self.num_params())?;
        let (pre, acts) = self.forward_cached(input);
        let output = acts[self.layers.len()].clone();
        let mut upstream = cotangent.to_vec();
        for l in (0..self.layers.len()).rev() {
            let s = self.layers[l];
            let off = self.offsets[l];
            let delta: Vec<f64> =
                (0..s.output).map(|o| upstream[o] * s.activation.derivative(pre[l][o], acts[l + 1][o])).collect();
            let prev = &acts[l];
            let (w, _) = self.layer_slices(l);
            let mut down = vec![0.0; s.input];
            for (o, &dz) in delta.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                let row = o * s.input;
                let grad_row = &mut param_grad[off + row..off + row + s.input];
                for i in 0..s.input {
                    grad_row[i] += dz * prev[i];
                    down[i] += dz * w[row + i];
                }
                param_grad[off + s.output * s.input + o] += dz;
            }
            upstream = down;
        }
        Ok((upstream, output))
    }

    /// Returns `(input_grad, param_grad)` for the given cotangent.
    pub fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, ParamVector)> {
        let mut grad = ParamVector::zeros(self.num_params());
        let (input_grad, _) = self.vjp_accumulate(input, cotangent, &mut grad)?;
        Ok((input_grad, grad))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Bias-corrected Adam. [`AdamState::step`] descends; callers maximising an
/// objective pass the negated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    /// One update. Non-finite gradients leave both `params` and the state
    /// untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        ensure_len("adam parameters", params.len(), self.first_moment.len())?;
        ensure_len("adam gradient", grad.len(), self.first_moment.len())?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient entry at index {i}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / c1;
            let v_hat = self.second_moment[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
