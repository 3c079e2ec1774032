use serde::{Deserialize, Serialize};

use super::{Gradients, Network, NnError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment accumulators for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Gradients<T>,
    pub v: Gradients<T>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(net: &Network<T>, config: AdamConfig) -> Self {
        Self { config, step: 0, m: Gradients::zeros_like(net), v: Gradients::zeros_like(net) }
    }
}

/// One bias-corrected Adam descent step along `grads`.
pub fn adam_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    opt: &mut OptState<T>,
) -> Result<(), NnError> {
    if grads.layers.len() != net.layers.len() || opt.m.layers.len() != net.layers.len() {
        return Err(NnError::ShapeMismatch("optimizer state does not match network".into()));
    }
    for ((l, g), m) in net.layers.iter().zip(&grads.layers).zip(&opt.m.layers) {
        if l.weights.len() != g.weights.len()
            || l.bias.len() != g.bias.len()
            || m.weights.len() != l.weights.len()
        {
            return Err(NnError::ShapeMismatch("gradient layer shape differs from network".into()));
        }
    }
    if !grads.is_finite() {
        return Err(NnError::NonFiniteGradient);
    }

    opt.step += 1;
    let c = opt.config;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let lr = T::lit(c.lr);
    let eps = T::lit(c.eps);
    let t = opt.step as i32;
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);

    for (k, layer) in net.layers.iter_mut().enumerate() {
        let g = &grads.layers[k];
        let m = &mut opt.m.layers[k];
        let v = &mut opt.v.layers[k];
        let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
        let gs = g.weights.iter().chain(g.bias.iter());
        let ms = m.weights.iter_mut().chain(m.bias.iter_mut());
        let vs = v.weights.iter_mut().chain(v.bias.iter_mut());
        for (((p, &gi), mi), vi) in params.zip(gs).zip(ms).zip(vs) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputActivation;

    fn scalar_net(w: f64) -> Network<f64> {
        let mut n = Network::zeros(&[1, 1], OutputActivation::Linear);
        n.layers[0].weights[0] = w;
        n
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar_net(0.7);
        net.layers[0].bias[0] = -0.2;
        let before = net.clone();
        let mut opt = OptState::new(&net, AdamConfig::with_lr(0.1));
        let g = Gradients::zeros_like(&net);
        adam_step(&mut net, &g, &mut opt).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = scalar_net(0.0);
        let mut opt = OptState::new(&net, AdamConfig::with_lr(0.1));
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[0] = 1.0;
        adam_step(&mut net, &g, &mut opt).unwrap();
        // m_hat = 1, v_hat = 1 at step 1
        let want = -0.1 / (1.0 + 1e-8);
        assert!((net.layers[0].weights[0] - want).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mk = || {
            let mut net = scalar_net(0.3);
            let mut opt = OptState::new(&net, AdamConfig::default());
            let mut g = Gradients::zeros_like(&net);
            g.layers[0].weights[0] = 0.25;
            g.layers[0].bias[0] = -1.5;
            for _ in 0..5 {
                adam_step(&mut net, &g, &mut opt).unwrap();
            }
            (net, opt)
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut net = scalar_net(0.0);
        let mut opt = OptState::new(&net, AdamConfig::default());
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].bias[0] = f64::INFINITY;
        assert_eq!(adam_step(&mut net, &g, &mut opt), Err(NnError::NonFiniteGradient));
        assert_eq!(opt.step, 0);
    }
}
