//! Meta-adaptive controller: state to softmax weights over agents, weighted
//! aggregation of their actions, and the risk-adjusted utility update.
//!
//! Loss over a minibatch of stored records, with `Qbar = w . Q` and
//! `Cbar = w . C` per record:
//! `L = -(mean(Qbar) / (std(Qbar) + eps) - lambda_meta * mean(Cbar))`.
//! The stored Q and C values are constants; only the weights are differentiated.

use std::io::Write;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, ProfileGroup, ReplayBuffer};
use crate::nn::{adam_step, AdamConfig, Gradients, NnError, OutputActivation};
use crate::rng::{SeedStreams, Stream};
use crate::scalar::Scalar;
use crate::{Mlp, MlpOptState, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("state contains a non-finite entry")]
    NonFiniteState,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {0} records; need at least 2")]
    BatchTooSmall(usize),
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Buffer(#[from] AgentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacConfig {
    pub lambda_meta: f64,
    pub eps: f64,
    /// Episodes between controller training rounds.
    pub train_freq: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Gradient steps per training round.
    pub steps_per_update: usize,
}

impl Default for MacConfig {
    fn default() -> Self {
        Self { lambda_meta: 0.5, eps: 1e-8, train_freq: 1, buffer_capacity: 50_000, batch_size: 128, lr: 1e-3, steps_per_update: 50 }
    }
}

impl MacConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let bad = |m: &str| Err(MetaError::InvalidConfig(m.into()));
        if !(self.lambda_meta >= 0.0) {
            return bad("lambda_meta must be non-negative");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.train_freq == 0 {
            return bad("train_freq must be at least 1");
        }
        if self.batch_size < 2 || self.buffer_capacity < self.batch_size {
            return bad("need 2 <= batch size <= buffer capacity");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Stored evaluation of every agent's proposal in one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacRecord {
    pub state: Arc<Vec<Real>>,
    pub q: Vec<Real>,
    pub c: Vec<Real>,
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|z| (*z - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn uniform_weights(n: usize) -> Vec<Real> {
    vec![1.0 / n as Real; n]
}

pub fn mac_weights(mac: &Mlp, s: &[Real]) -> Result<Vec<Real>, MetaError> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(MetaError::NonFiniteState);
    }
    Ok(softmax(&mac.predict(s)?))
}

/// `sum_i w_i a_i`.
pub fn aggregate<T: Scalar>(actions: &[Vec<T>], w: &[T]) -> Result<Vec<T>, MetaError> {
    if actions.len() != w.len() || actions.is_empty() {
        return Err(MetaError::ShapeMismatch(format!("{} actions for {} weights", actions.len(), w.len())));
    }
    let d = actions[0].len();
    if actions.iter().any(|a| a.len() != d) {
        return Err(MetaError::ShapeMismatch("actions differ in length".into()));
    }
    let mut out = vec![T::zero(); d];
    for (a, &wi) in actions.iter().zip(w) {
        for (o, &x) in out.iter_mut().zip(a) {
            *o += wi * x;
        }
    }
    Ok(out)
}

/// Loss and its derivative with respect to each record's weight vector.
pub fn mac_loss_from_weights<T: Scalar>(
    weights: &[Vec<T>],
    q: &[Vec<T>],
    c: &[Vec<T>],
    lambda_meta: T,
    eps: T,
) -> Result<(T, Vec<Vec<T>>), MetaError> {
    let b = weights.len();
    if b < 2 {
        return Err(MetaError::BatchTooSmall(b));
    }
    let bt = T::from_usize(b).unwrap();
    let dot = |w: &[T], v: &[T]| w.iter().zip(v).map(|(x, y)| *x * *y).sum::<T>();
    let qbar: Vec<T> = (0..b).map(|k| dot(&weights[k], &q[k])).collect();
    let cbar: Vec<T> = (0..b).map(|k| dot(&weights[k], &c[k])).collect();
    let e = qbar.iter().copied().sum::<T>() / bt;
    let s = (qbar.iter().map(|x| (*x - e) * (*x - e)).sum::<T>() / bt).sqrt();
    let ec = cbar.iter().copied().sum::<T>() / bt;
    let loss = -(e / (s + eps) - lambda_meta * ec);

    let denom = s + eps;
    let grads = (0..b)
        .map(|k| {
            let ds = if s > T::zero() { (qbar[k] - e) / (bt * s) } else { T::zero() };
            let dq = -(T::one() / (bt * denom) - e * ds / (denom * denom));
            let dc = lambda_meta / bt;
            (0..weights[k].len()).map(|i| dq * q[k][i] + dc * c[k][i]).collect()
        })
        .collect();
    Ok((loss, grads))
}

/// Chain rule through softmax: `dz_j = w_j (g_j - w . g)`.
pub fn softmax_backward<T: Scalar>(w: &[T], g: &[T]) -> Vec<T> {
    let wg: T = w.iter().zip(g).map(|(a, b)| *a * *b).sum();
    w.iter().zip(g).map(|(wj, gj)| *wj * (*gj - wg)).collect()
}

/// Loss and parameter gradient of the controller on a batch.
pub fn mac_loss_and_gradient(
    mac: &Mlp,
    batch: &[&MacRecord],
    cfg: &MacConfig,
) -> Result<(Real, Gradients<Real>), MetaError> {
    if batch.len() < 2 {
        return Err(MetaError::BatchTooSmall(batch.len()));
    }
    let n = mac.output_dim();
    let mut caches = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    for r in batch {
        if r.q.len() != n || r.c.len() != n {
            return Err(MetaError::ShapeMismatch(format!("record holds {} / {} values for {n} agents", r.q.len(), r.c.len())));
        }
        let (z, cache) = mac.forward(&r.state)?;
        weights.push(softmax(&z));
        caches.push(cache);
    }
    let q: Vec<Vec<Real>> = batch.iter().map(|r| r.q.clone()).collect();
    let c: Vec<Vec<Real>> = batch.iter().map(|r| r.c.clone()).collect();
    let (loss, dw) = mac_loss_from_weights(&weights, &q, &c, cfg.lambda_meta, cfg.eps)?;
    let mut grads = Gradients::zeros_like(mac);
    for k in 0..batch.len() {
        let dz = softmax_backward(&weights[k], &dw[k]);
        mac.backward_accumulate(&caches[k], &dz, &mut grads)?;
    }
    Ok((loss, grads))
}

/// One Adam step on the controller. Returns the loss before the step.
pub fn mac_update(mac: &mut Mlp, opt: &mut MlpOptState, batch: &[&MacRecord], cfg: &MacConfig) -> Result<Real, MetaError> {
    let (loss, grads) = mac_loss_and_gradient(mac, batch, cfg)?;
    adam_step(mac, &grads, opt)?;
    Ok(loss)
}

/// Controller network, its optimizer and its record buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub net: Mlp,
    pub opt: MlpOptState,
    pub buffer: ReplayBuffer<MacRecord>,
    pub rng: Stream,
}

impl Controller {
    pub fn new(state_dim: usize, n_agents: usize, hidden: &[usize], cfg: &MacConfig, streams: &SeedStreams) -> Self {
        let mut dims = vec![state_dim];
        dims.extend(hidden);
        dims.push(n_agents);
        let net = Mlp::new(&dims, OutputActivation::Linear, None, &mut streams.stream("mac/init"));
        Self {
            opt: MlpOptState::new(&net, AdamConfig::with_lr(cfg.lr)),
            net,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            rng: streams.stream("mac/buffer"),
        }
    }

    pub fn weights(&self, s: &[Real]) -> Result<Vec<Real>, MetaError> {
        mac_weights(&self.net, s)
    }

    /// `steps_per_update` minibatch steps, or nothing while the buffer holds
    /// fewer than `batch_size` records. Returns the per-step losses.
    pub fn train_round(&mut self, cfg: &MacConfig) -> Result<Vec<Real>, MetaError> {
        if self.buffer.len() < cfg.batch_size {
            return Ok(Vec::new());
        }
        let mut losses = Vec::with_capacity(cfg.steps_per_update);
        for _ in 0..cfg.steps_per_update {
            let idx = self.buffer.sample_indices(cfg.batch_size, &mut self.rng)?;
            let batch: Vec<&MacRecord> = idx.iter().map(|&i| &self.buffer.slots()[i]).collect();
            losses.push(mac_update(&mut self.net, &mut self.opt, &batch, cfg)?);
        }
        Ok(losses)
    }
}

/// Weight mass on the conservative, neutral and aggressive thirds.
pub fn group_mass(w: &[Real]) -> [Real; 3] {
    let mut out = [0.0; 3];
    for (i, x) in w.iter().enumerate() {
        out[ProfileGroup::of(i, w.len()) as usize] += x;
    }
    out
}

pub fn weight_trace_header(n: usize) -> String {
    let mut h = String::from("date");
    for i in 1..=n {
        h.push_str(&format!(",w_{i}"));
    }
    h.push_str(",conservative,neutral,aggressive");
    h
}

pub fn write_weight_row<W: Write>(out: &mut W, date: NaiveDate, w: &[Real]) -> std::io::Result<()> {
    write!(out, "{date}")?;
    for x in w {
        write!(out, ",{x}")?;
    }
    let g = group_mass(w);
    writeln!(out, ",{},{},{}", g[0], g[1], g[2])
}
