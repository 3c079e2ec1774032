//! Fully connected networks with ReLU hidden layers and hand-written backprop.
//!
//! Every network in the system (actor, critic, safety-critic, controller) is an
//! instance of [`Network`]. Weights are stored row-major as `out x in`.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, OptState};
pub use checkpoint::{NetworkCheckpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Hidden-layer nonlinearity. Only ReLU is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Relu,
}

/// Nonlinearity applied to the final layer.
///
/// `Linear` doubles as the "softmax-deferred" head: the controller emits logits
/// and the softmax is applied by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Tanh,
    Sigmoid,
}

impl OutputActivation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            OutputActivation::Linear => z,
            OutputActivation::Tanh => z.tanh(),
            OutputActivation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative<T: Scalar>(self, y: T) -> T {
        match self {
            OutputActivation::Linear => T::one(),
            OutputActivation::Tanh => T::one() - y * y,
            OutputActivation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    fn affine(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        for r in 0..self.out_dim {
            let row = &self.weights[r * self.in_dim..(r + 1) * self.in_dim];
            let mut acc = self.bias[r];
            for (w, xi) in row.iter().zip(x) {
                acc += *w * *xi;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network<T> {
    pub layers: Vec<Dense<T>>,
    pub hidden: HiddenActivation,
    pub output: OutputActivation,
}

/// Per-layer values kept by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input fed to each layer.
    pub inputs: Vec<Vec<T>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<T>>,
    pub output: Vec<T>,
}

/// Parameter gradients with the same shape as a [`Network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrad<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![T::zero(); l.weights.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, k: T) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|g| *g *= k);
            l.bias.iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn flatten(&self) -> Vec<T> {
        self.iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| *g == T::zero())
    }
}

impl<T: Scalar> Network<T> {
    /// Builds a network with `dims = [input, hidden..., output]` and fan-in
    /// uniform initialization. When `final_bound` is set, the last layer is drawn
    /// from `[-final_bound, final_bound]` instead.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        output: OutputActivation,
        final_bound: Option<f64>,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "a network needs input and output dimensions");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (dims[k], dims[k + 1]);
                let bound = match final_bound {
                    Some(b) if k == n - 1 => b,
                    _ => 1.0 / (fan_in as f64).sqrt(),
                };
                let mut draw = || T::lit(rng.random_range(-bound..=bound));
                let weights = (0..fan_in * fan_out).map(|_| draw()).collect();
                let bias = (0..fan_out).map(|_| draw()).collect();
                Dense { in_dim: fan_in, out_dim: fan_out, weights, bias }
            })
            .collect();
        Self { layers, hidden: HiddenActivation::Relu, output }
    }

    /// All-zero network of the given shape.
    pub fn zeros(dims: &[usize], output: OutputActivation) -> Self {
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers, hidden: HiddenActivation::Relu, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// `[input, hidden..., output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.output == other.output
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    fn check_input(&self, x: &[T]) -> Result<(), NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
        Ok(())
    }

    /// Forward pass retaining the cache needed by [`Network::backward`].
    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, ForwardCache<T>), NnError> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut current = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.affine(&current, &mut z);
            let a: Vec<T> = if k + 1 == n {
                z.iter().map(|&v| self.output.apply(v)).collect()
            } else {
                z.iter().map(|&v| v.max(T::zero())).collect()
            };
            inputs.push(std::mem::replace(&mut current, a));
            pre.push(z);
        }
        let output = current.clone();
        Ok((current, ForwardCache { inputs, pre, output }))
    }

    /// Forward pass without a cache. Produces the same bits as [`Network::forward`].
    pub fn predict(&self, x: &[T]) -> Result<Vec<T>, NnError> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut current = x.to_vec();
        let mut z = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            layer.affine(&current, &mut z);
            current.clear();
            if k + 1 == n {
                current.extend(z.iter().map(|&v| self.output.apply(v)));
            } else {
                current.extend(z.iter().map(|&v| v.max(T::zero())));
            }
        }
        Ok(current)
    }

    /// Row-wise forward over a batch.
    pub fn forward_batch(&self, xs: &[Vec<T>]) -> Result<Vec<(Vec<T>, ForwardCache<T>)>, NnError> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Reverse-mode gradients of `grad_output . f(x)` with respect to the
    /// parameters and the input.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_output: &[T],
    ) -> Result<(Gradients<T>, Vec<T>), NnError> {
        let mut grads = Gradients::zeros_like(self);
        let dx = self.backward_accumulate(cache, grad_output, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`Network::backward`] but adds the parameter gradients into `grads`,
    /// which lets a minibatch reuse one buffer.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache<T>,
        grad_output: &[T],
        grads: &mut Gradients<T>,
    ) -> Result<Vec<T>, NnError> {
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch("gradient buffer does not match network".into()));
        }
        self.backprop(cache, grad_output, Some(grads))
    }

    /// Gradient with respect to the input only; parameters are treated as
    /// constants.
    pub fn backward_input(&self, cache: &ForwardCache<T>, grad_output: &[T]) -> Result<Vec<T>, NnError> {
        self.backprop(cache, grad_output, None)
    }

    fn backprop(
        &self,
        cache: &ForwardCache<T>,
        grad_output: &[T],
        mut grads: Option<&mut Gradients<T>>,
    ) -> Result<Vec<T>, NnError> {
        if grad_output.len() != self.output_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "grad_output has {} entries, network outputs {}",
                grad_output.len(),
                self.output_dim()
            )));
        }
        if cache.pre.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch("cache does not match network".into()));
        }
        let n = self.layers.len();
        // dL/dz for the last layer
        let mut delta: Vec<T> = grad_output
            .iter()
            .zip(&cache.output)
            .map(|(&g, &y)| g * self.output.derivative(y))
            .collect();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            if let Some(grads) = grads.as_deref_mut() {
                let input = &cache.inputs[k];
                let g = &mut grads.layers[k];
                for r in 0..layer.out_dim {
                    let d = delta[r];
                    g.bias[r] += d;
                    if d != T::zero() {
                        let row = &mut g.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                        for (gw, &xi) in row.iter_mut().zip(input) {
                            *gw += d * xi;
                        }
                    }
                }
            }
            let mut dx = vec![T::zero(); layer.in_dim];
            for r in 0..layer.out_dim {
                let d = delta[r];
                if d == T::zero() {
                    continue;
                }
                let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (acc, &w) in dx.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
            if k > 0 {
                // ReLU of the previous layer
                for (v, &z) in dx.iter_mut().zip(&cache.pre[k - 1]) {
                    if z <= T::zero() {
                        *v = T::zero();
                    }
                }
            }
            delta = dx;
        }
        Ok(delta)
    }
}

/// Polyak averaging: `target = (1 - tau) * target + tau * source`.
pub fn soft_update<T: Scalar>(target: &mut Network<T>, source: &Network<T>, tau: T) -> Result<(), NnError> {
    if !target.same_shape(source) {
        return Err(NnError::ShapeMismatch(format!(
            "soft update between {:?} and {:?}",
            target.dims(),
            source.dims()
        )));
    }
    let keep = T::one() - tau;
    for (t, &s) in target.params_mut().zip(source.params()) {
        *t = keep * *t + tau * s;
    }
    Ok(())
}
