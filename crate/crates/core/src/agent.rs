//! Safety-critic DDPG agent: actor, critic, safety-critic, target copies,
//! replay buffer and the three update rules.
//!
//! The actor ascends `Q(s, pi(s)) - lambda * relu(C(s, pi(s)) - theta)`. The
//! penalty term is only evaluated into the gradient when it is active, so an
//! inactive penalty gives exactly the plain DDPG update.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{adam_step, soft_update, AdamConfig, Gradients, NnError, OutputActivation};
use crate::rng::{SeedStreams, Stream};
use crate::{Mlp, MlpOptState, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("state contains a non-finite entry")]
    NonFiniteState,
    #[error("empty batch")]
    EmptyBatch,
    #[error("risk label {0} outside [0, 1]")]
    LabelOutOfRange(f64),
    #[error("buffer holds {have} transitions, need {need}")]
    BufferUnderfilled { have: usize, need: usize },
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Risk tolerance `theta` and penalty weight `lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub theta: f64,
    pub lambda: f64,
    pub label: String,
}

const LABELS: [&str; 10] = [
    "Ultra Conservative",
    "Conservative",
    "Moderately Conservative",
    "Cautious Balanced",
    "Balanced",
    "Balanced Growth",
    "Moderate Growth",
    "Growth",
    "Aggressive Growth",
    "Maximum Growth",
];

/// Grid of `n` profiles from most conservative (index 0) to most aggressive.
///
/// `theta` is spaced linearly over `theta_range`, `lambda` geometrically from
/// `lambda_range.0` down to `lambda_range.1`. A single agent sits at the
/// midpoint of both scales.
pub fn profile_grid(n: usize, theta_range: (f64, f64), lambda_range: (f64, f64)) -> Vec<RiskProfile> {
    let (t0, t1) = theta_range;
    let (l0, l1) = lambda_range;
    (0..n)
        .map(|i| {
            let x = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let label_idx = (x * (LABELS.len() - 1) as f64).round() as usize;
            RiskProfile { theta: t0 + x * (t1 - t0), lambda: l0 * (l1 / l0).powf(x), label: LABELS[label_idx].to_string() }
        })
        .collect()
}

pub fn default_profile_grid(n: usize) -> Vec<RiskProfile> {
    profile_grid(n, (0.15, 0.85), (8.0, 0.25))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProfileGroup {
    Conservative,
    Neutral,
    Aggressive,
}

impl ProfileGroup {
    pub const ALL: [ProfileGroup; 3] = [ProfileGroup::Conservative, ProfileGroup::Neutral, ProfileGroup::Aggressive];

    /// Thirds of the grid: `floor(3 i / n)`.
    pub fn of(index: usize, n: usize) -> Self {
        match 3 * index / n.max(1) {
            0 => ProfileGroup::Conservative,
            1 => ProfileGroup::Neutral,
            _ => ProfileGroup::Aggressive,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProfileGroup::Conservative => "conservative",
            ProfileGroup::Neutral => "neutral",
            ProfileGroup::Aggressive => "aggressive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub safety_lr: f64,
    pub tau: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub noise_initial: f64,
    pub noise_decay: f64,
    pub noise_floor: f64,
    /// Uniform bound of the actor's last layer at initialization.
    pub actor_final_bound: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128, 64],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            safety_lr: 1e-3,
            tau: 0.005,
            gamma: 0.99,
            buffer_capacity: 100_000,
            batch_size: 64,
            noise_initial: 0.2,
            noise_decay: 0.995,
            noise_floor: 0.02,
            actor_final_bound: 3e-3,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("need 0 < batch size <= buffer capacity");
        }
        if self.hidden.iter().any(|h| *h == 0) {
            return bad("hidden layer widths must be positive");
        }
        if [self.actor_lr, self.critic_lr, self.safety_lr].iter().any(|lr| !(*lr > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.noise_initial < 0.0 || self.noise_floor < 0.0 || !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return bad("noise schedule must be non-negative with decay in (0, 1]");
        }
        Ok(())
    }

    /// Exploration std for a 0-based episode index.
    pub fn noise_at(&self, episode: usize) -> f64 {
        (self.noise_initial * self.noise_decay.powi(episode as i32)).max(self.noise_floor.min(self.noise_initial))
    }
}

/// Online networks, targets and optimizer states of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentNets {
    pub actor: Mlp,
    pub critic: Mlp,
    pub safety: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub actor_opt: MlpOptState,
    pub critic_opt: MlpOptState,
    pub safety_opt: MlpOptState,
}

impl AgentNets {
    /// Fresh networks drawn from the `agent/{seed_index}/init/*` streams.
    pub fn new(state_dim: usize, n_assets: usize, cfg: &AgentConfig, streams: &SeedStreams, seed_index: usize) -> Self {
        let dims = |input: usize, output: usize| {
            let mut d = vec![input];
            d.extend(&cfg.hidden);
            d.push(output);
            d
        };
        let actor = Mlp::new(
            &dims(state_dim, n_assets),
            OutputActivation::Tanh,
            Some(cfg.actor_final_bound),
            &mut streams.agent(seed_index, "init/actor"),
        );
        let sa = state_dim + n_assets;
        let critic = Mlp::new(&dims(sa, 1), OutputActivation::Linear, None, &mut streams.agent(seed_index, "init/critic"));
        let safety = Mlp::new(&dims(sa, 1), OutputActivation::Sigmoid, None, &mut streams.agent(seed_index, "init/safety"));
        Self::from_networks(actor, critic, safety, cfg)
    }

    pub fn from_networks(actor: Mlp, critic: Mlp, safety: Mlp, cfg: &AgentConfig) -> Self {
        Self {
            actor_opt: MlpOptState::new(&actor, AdamConfig::with_lr(cfg.actor_lr)),
            critic_opt: MlpOptState::new(&critic, AdamConfig::with_lr(cfg.critic_lr)),
            safety_opt: MlpOptState::new(&safety, AdamConfig::with_lr(cfg.safety_lr)),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            safety,
        }
    }

    pub fn n_assets(&self) -> usize {
        self.actor.output_dim()
    }

    /// `(Q(s, a), C(s, a))` with the online networks.
    pub fn evaluate(&self, s: &[Real], a: &[Real]) -> Result<(Real, Real), AgentError> {
        let x = concat(s, a);
        Ok((self.critic.predict(&x)?[0], self.safety.predict(&x)?[0]))
    }
}

fn concat(s: &[Real], a: &[Real]) -> Vec<Real> {
    let mut x = Vec::with_capacity(s.len() + a.len());
    x.extend_from_slice(s);
    x.extend_from_slice(a);
    x
}

/// Deterministic actor output plus clipped Gaussian noise.
pub fn act<R: Rng + ?Sized>(nets: &AgentNets, s: &[Real], noise_scale: f64, rng: &mut R) -> Result<Vec<Real>, AgentError> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(AgentError::NonFiniteState);
    }
    let mut a = nets.actor.predict(s)?;
    if noise_scale > 0.0 {
        for x in a.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = (*x + noise_scale * z).clamp(-1.0, 1.0);
        }
    }
    Ok(a)
}

/// One replay record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Arc<Vec<Real>>,
    /// Executed action after the overlay.
    pub action: Vec<Real>,
    pub reward: Real,
    pub next_state: Arc<Vec<Real>>,
    pub done: bool,
    /// This agent's own proposal.
    pub proposed: Vec<Real>,
    /// Environmental risk of the proposal.
    pub risk_label: Real,
}

/// FIFO ring buffer with uniform sampling without replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    /// Slot overwritten by the next push once full.
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::new(), next: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
            self.next = (self.next + 1) % self.capacity;
        }
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let (a, b) = self.items.split_at(self.next);
        b.iter().chain(a)
    }

    /// Storage indices of a uniform sample without replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>, AgentError> {
        if batch > self.items.len() || batch == 0 {
            return Err(AgentError::BufferUnderfilled { have: self.items.len(), need: batch.max(1) });
        }
        Ok(index::sample(rng, self.items.len(), batch).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&T>, AgentError> {
        Ok(self.sample_indices(batch, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }

    /// Raw storage, in slot order.
    pub fn slots(&self) -> &[T] {
        &self.items
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> ReplayBuffer<U> {
        ReplayBuffer { capacity: self.capacity, items: self.items.iter().map(f).collect(), next: self.next }
    }
}

/// Mean squared TD error against `r + gamma (1 - done) Q'(s', pi'(s'))` and
/// its gradient with respect to the critic parameters.
pub fn critic_loss_gradient(nets: &AgentNets, batch: &[&Transition], gamma: f64) -> Result<(Real, Gradients<Real>), AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let b = batch.len() as Real;
    let mut grads = Gradients::zeros_like(&nets.critic);
    let mut loss = 0.0;
    for tr in batch {
        let y = if tr.done {
            tr.reward
        } else {
            let a_next = nets.actor_target.predict(&tr.next_state)?;
            let q_next = nets.critic_target.predict(&concat(&tr.next_state, &a_next))?[0];
            tr.reward + gamma * q_next
        };
        let (q, cache) = nets.critic.forward(&concat(&tr.state, &tr.action))?;
        let err = q[0] - y;
        loss += err * err;
        nets.critic.backward_accumulate(&cache, &[2.0 * err / b], &mut grads)?;
    }
    Ok((loss / b, grads))
}

/// One Adam step on the critic. Returns the loss before the step.
pub fn update_critic(nets: &mut AgentNets, batch: &[&Transition], gamma: f64) -> Result<Real, AgentError> {
    let (loss, grads) = critic_loss_gradient(nets, batch, gamma)?;
    adam_step(&mut nets.critic, &grads, &mut nets.critic_opt)?;
    Ok(loss)
}

/// MSE of the safety-critic against the stored risk labels of the proposed
/// actions, with its parameter gradient.
pub fn safety_loss_gradient(nets: &AgentNets, batch: &[&Transition]) -> Result<(Real, Gradients<Real>), AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    if let Some(tr) = batch.iter().find(|t| !(0.0..=1.0).contains(&t.risk_label)) {
        return Err(AgentError::LabelOutOfRange(tr.risk_label));
    }
    let b = batch.len() as Real;
    let mut grads = Gradients::zeros_like(&nets.safety);
    let mut loss = 0.0;
    for tr in batch {
        let (c, cache) = nets.safety.forward(&concat(&tr.state, &tr.proposed))?;
        let err = c[0] - tr.risk_label;
        loss += err * err;
        nets.safety.backward_accumulate(&cache, &[2.0 * err / b], &mut grads)?;
    }
    Ok((loss / b, grads))
}

/// One Adam step on the safety-critic. Returns the loss before the step.
pub fn update_safety_critic(nets: &mut AgentNets, batch: &[&Transition]) -> Result<Real, AgentError> {
    let (loss, grads) = safety_loss_gradient(nets, batch)?;
    adam_step(&mut nets.safety, &grads, &mut nets.safety_opt)?;
    Ok(loss)
}

/// Mean actor objective and its gradient over a batch of states, with the
/// critic and safety-critic held fixed.
pub fn actor_objective_gradient(
    nets: &AgentNets,
    states: &[&[Real]],
    profile: &RiskProfile,
) -> Result<(Real, Gradients<Real>), AgentError> {
    if states.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let b = states.len() as Real;
    let d = nets.n_assets();
    let mut grads = Gradients::zeros_like(&nets.actor);
    let mut objective = 0.0;
    for s in states {
        let (a, a_cache) = nets.actor.forward(s)?;
        let x = concat(s, &a);
        let (q, q_cache) = nets.critic.forward(&x)?;
        let dq = nets.critic.backward_input(&q_cache, &[1.0])?;
        let (c, c_cache) = nets.safety.forward(&x)?;
        let excess = c[0] - profile.theta;
        let mut j = q[0];
        // descend on -J
        let mut g: Vec<Real> = dq[s.len()..].iter().map(|v| -v / b).collect();
        if profile.lambda > 0.0 && excess > 0.0 {
            j -= profile.lambda * excess;
            let dc = nets.safety.backward_input(&c_cache, &[1.0])?;
            for k in 0..d {
                g[k] += profile.lambda * dc[s.len() + k] / b;
            }
        }
        objective += j;
        nets.actor.backward_accumulate(&a_cache, &g, &mut grads)?;
    }
    Ok((objective / b, grads))
}

/// One Adam ascent step on the actor. Returns the mean objective before the step.
pub fn update_actor(nets: &mut AgentNets, batch: &[&Transition], profile: &RiskProfile) -> Result<Real, AgentError> {
    let states: Vec<&[Real]> = batch.iter().map(|t| t.state.as_slice()).collect();
    let (objective, grads) = actor_objective_gradient(nets, &states, profile)?;
    adam_step(&mut nets.actor, &grads, &mut nets.actor_opt)?;
    Ok(objective)
}

pub fn update_targets(nets: &mut AgentNets, tau: f64) -> Result<(), AgentError> {
    soft_update(&mut nets.actor_target, &nets.actor, tau)?;
    soft_update(&mut nets.critic_target, &nets.critic, tau)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentLosses {
    pub critic: Real,
    pub safety: Real,
    pub actor_objective: Real,
}

/// One ensemble member with its own networks, buffer and random streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub index: usize,
    pub profile: RiskProfile,
    pub nets: AgentNets,
    pub buffer: ReplayBuffer<Transition>,
    pub noise_rng: Stream,
    pub buffer_rng: Stream,
}

impl Agent {
    /// `seed_index` selects the random streams; distinct agents may share it to
    /// produce replicas.
    pub fn new(
        index: usize,
        seed_index: usize,
        profile: RiskProfile,
        state_dim: usize,
        n_assets: usize,
        cfg: &AgentConfig,
        streams: &SeedStreams,
    ) -> Self {
        Self {
            index,
            profile,
            nets: AgentNets::new(state_dim, n_assets, cfg, streams, seed_index),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            noise_rng: streams.agent(seed_index, "noise"),
            buffer_rng: streams.agent(seed_index, "buffer"),
        }
    }

    pub fn act(&mut self, s: &[Real], noise_scale: f64) -> Result<Vec<Real>, AgentError> {
        act(&self.nets, s, noise_scale, &mut self.noise_rng)
    }

    /// Critic, safety-critic, actor and target updates on one sampled batch, or
    /// `None` while the buffer is still warming up.
    pub fn learn(&mut self, cfg: &AgentConfig) -> Result<Option<AgentLosses>, AgentError> {
        if self.buffer.len() < cfg.batch_size {
            return Ok(None);
        }
        let idx = self.buffer.sample_indices(cfg.batch_size, &mut self.buffer_rng)?;
        let batch: Vec<&Transition> = idx.iter().map(|&i| &self.buffer.slots()[i]).collect();
        let critic = update_critic(&mut self.nets, &batch, cfg.gamma)?;
        let safety = update_safety_critic(&mut self.nets, &batch)?;
        let actor_objective = update_actor(&mut self.nets, &batch, &self.profile)?;
        update_targets(&mut self.nets, cfg.tau)?;
        Ok(Some(AgentLosses { critic, safety, actor_objective }))
    }
}
