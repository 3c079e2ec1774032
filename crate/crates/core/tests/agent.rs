use std::sync::Arc;

use mars_core::agent::{
    actor_objective_gradient, update_critic, update_safety_critic, AgentConfig, AgentNets, ReplayBuffer, RiskProfile,
    Transition,
};
use mars_core::nn::{Network, OutputActivation};
use mars_core::rng::{SeedStreams, Stream};
use mars_core::Mlp;
use proptest::prelude::*;
use rand::Rng;

fn frozen_batch(rng: &mut Stream, n: usize, state_dim: usize, d: usize, reward: f64, label: f64) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let s: Vec<f64> = (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            Transition {
                state: Arc::new(s),
                action: a.clone(),
                reward,
                next_state: Arc::new(s2),
                done: false,
                proposed: a,
                risk_label: label,
            }
        })
        .collect()
}

fn profile(theta: f64, lambda: f64) -> RiskProfile {
    RiskProfile { theta, lambda, label: String::new() }
}

#[test]
fn critic_loss_falls_on_zero_reward_batch() {
    let streams = SeedStreams::new(11);
    let cfg = AgentConfig { hidden: vec![32, 16], ..Default::default() };
    let mut nets = AgentNets::new(7, 2, &cfg, &streams, 0);
    let batch = frozen_batch(&mut streams.stream("batch"), 64, 7, 2, 0.0, 0.0);
    let refs: Vec<&Transition> = batch.iter().collect();
    let first = update_critic(&mut nets, &refs, 0.99).unwrap();
    let mut last = first;
    for _ in 0..200 {
        last = update_critic(&mut nets, &refs, 0.99).unwrap();
    }
    assert!(last < first, "{last} !< {first}");
}

#[test]
fn safety_critic_learns_all_zero_labels() {
    let streams = SeedStreams::new(12);
    let cfg = AgentConfig::default();
    let mut nets = AgentNets::new(19, 3, &cfg, &streams, 0);
    let batch = frozen_batch(&mut streams.stream("batch"), 64, 19, 3, 0.0, 0.0);
    let refs: Vec<&Transition> = batch.iter().collect();
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        loss = update_safety_critic(&mut nets, &refs).unwrap();
    }
    let mean: f64 = batch.iter().map(|t| nets.evaluate(&t.state, &t.proposed).unwrap().1).sum::<f64>() / 64.0;
    assert!(loss < 1e-3, "loss {loss}");
    assert!(mean < 0.05, "mean prediction {mean}");
}

fn dense(dims: &[usize], out: OutputActivation, weights: &[&[f64]], biases: &[&[f64]]) -> Mlp {
    let mut n = Network::zeros(dims, out);
    for (k, l) in n.layers.iter_mut().enumerate() {
        l.weights = weights[k].to_vec();
        l.bias = biases[k].to_vec();
    }
    n
}

/// Two-parameter actor `a = tanh(w s + b)` against `Q = 0.3 s + 1.5 a` and
/// `C = sigmoid(0.5 s + 2 a)`; the objective per state is
/// `Q - lambda * max(0, C - theta)`.
fn toy_nets(w: f64, b: f64) -> AgentNets {
    let actor = dense(&[1, 1], OutputActivation::Tanh, &[&[w]], &[&[b]]);
    let critic = dense(&[2, 1], OutputActivation::Linear, &[&[0.3, 1.5]], &[&[0.0]]);
    let safety = dense(&[2, 1], OutputActivation::Sigmoid, &[&[0.5, 2.0]], &[&[0.0]]);
    AgentNets::from_networks(actor, critic, safety, &AgentConfig::default())
}

fn analytic_objective(w: f64, b: f64, states: &[f64], p: &RiskProfile) -> f64 {
    states
        .iter()
        .map(|s| {
            let a = (w * s + b).tanh();
            let c = 1.0 / (1.0 + (-(0.5 * s + 2.0 * a)).exp());
            0.3 * s + 1.5 * a - p.lambda * (c - p.theta).max(0.0)
        })
        .sum::<f64>()
        / states.len() as f64
}

#[test]
fn two_parameter_actor_gradient_matches_closed_form_objective() {
    let states = [-0.8, -0.1, 0.4, 0.9];
    let refs: Vec<Vec<f64>> = states.iter().map(|s| vec![*s]).collect();
    let slices: Vec<&[f64]> = refs.iter().map(|v| v.as_slice()).collect();
    let p = profile(0.3, 2.5);
    let (w, b) = (0.7, 0.2);
    let (j, g) = actor_objective_gradient(&toy_nets(w, b), &slices, &p).unwrap();
    assert!((j - analytic_objective(w, b, &states, &p)).abs() < 1e-14);
    let h = 1e-6;
    let dw = (analytic_objective(w + h, b, &states, &p) - analytic_objective(w - h, b, &states, &p)) / (2.0 * h);
    let db = (analytic_objective(w, b + h, &states, &p) - analytic_objective(w, b - h, &states, &p)) / (2.0 * h);
    // the returned gradient is for descent on -J
    let flat = g.flatten();
    assert!((-flat[0] - dw).abs() / dw.abs() < 1e-4, "{} vs {dw}", -flat[0]);
    assert!((-flat[1] - db).abs() / db.abs() < 1e-4, "{} vs {db}", -flat[1]);
}

#[test]
fn replay_sampling_is_uniform() {
    let mut buf = ReplayBuffer::new(20);
    for i in 0..20 {
        buf.push(i);
    }
    let mut rng = SeedStreams::new(5).stream("sampling");
    let (draws, batch) = (20_000usize, 5usize);
    let mut counts = [0usize; 20];
    for _ in 0..draws {
        for i in buf.sample_indices(batch, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    // each slot is in a batch with probability 5/20
    let p = batch as f64 / 20.0;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, c) in counts.iter().enumerate() {
        assert!((*c as f64 - mean).abs() <= 3.0 * sd, "slot {i}: {c} vs {mean} +- {}", 3.0 * sd);
    }
}

fn random_nets(seed: u64) -> (AgentNets, Vec<Vec<f64>>) {
    let streams = SeedStreams::new(seed);
    let cfg = AgentConfig { hidden: vec![6, 4], actor_final_bound: 0.5, ..Default::default() };
    let nets = AgentNets::new(5, 2, &cfg, &streams, 0);
    let mut rng = streams.stream("states");
    let states = (0..8).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (nets, states)
}

fn max_c(nets: &AgentNets, states: &[Vec<f64>]) -> (f64, f64) {
    let cs: Vec<f64> = states
        .iter()
        .map(|s| {
            let a = nets.actor.predict(s).unwrap();
            nets.evaluate(s, &a).unwrap().1
        })
        .collect();
    (cs.iter().copied().fold(f64::INFINITY, f64::min), cs.iter().copied().fold(0.0, f64::max))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inactive_penalty_gives_unpenalized_gradient(seed in any::<u64>(), lambda in 0.01f64..10.0, margin in 1e-9f64..0.5) {
        let (nets, states) = random_nets(seed);
        let slices: Vec<&[f64]> = states.iter().map(|s| s.as_slice()).collect();
        let (_, hi) = max_c(&nets, &states);
        let theta = (hi + margin).min(1.0);
        prop_assume!(theta > hi);
        let with = actor_objective_gradient(&nets, &slices, &profile(theta, lambda)).unwrap().1;
        let without = actor_objective_gradient(&nets, &slices, &profile(theta, 0.0)).unwrap().1;
        prop_assert!(with.flatten().iter().zip(without.flatten()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn active_penalty_changes_gradient(seed in any::<u64>(), lambda in 0.01f64..10.0) {
        let (nets, states) = random_nets(seed);
        let slices: Vec<&[f64]> = states.iter().map(|s| s.as_slice()).collect();
        let (lo, _) = max_c(&nets, &states);
        // a dead ReLU layer can make C flat in the action; nothing to gate then
        prop_assume!(states.iter().any(|s| {
            let a = nets.actor.predict(s).unwrap();
            let x: Vec<f64> = s.iter().chain(&a).copied().collect();
            let (_, cache) = nets.safety.forward(&x).unwrap();
            nets.safety.backward_input(&cache, &[1.0]).unwrap()[5..].iter().any(|g| *g != 0.0)
        }));
        let theta = lo / 2.0;
        let with = actor_objective_gradient(&nets, &slices, &profile(theta, lambda)).unwrap().1;
        let without = actor_objective_gradient(&nets, &slices, &profile(theta, 0.0)).unwrap().1;
        prop_assert!(with.flatten() != without.flatten());
    }

    #[test]
    fn safety_output_is_a_probability(seed in any::<u64>(), s in prop::collection::vec(-50.0f64..50.0, 5), a in prop::collection::vec(-1.0f64..=1.0, 2)) {
        let (nets, _) = random_nets(seed);
        let (_, c) = nets.evaluate(&s, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn updates_are_deterministic(seed in any::<u64>()) {
        let streams = SeedStreams::new(seed);
        let cfg = AgentConfig { hidden: vec![6], ..Default::default() };
        let batch = frozen_batch(&mut streams.stream("b"), 8, 4, 1, 0.01, 0.3);
        let refs: Vec<&Transition> = batch.iter().collect();
        let run = || {
            let mut n = AgentNets::new(4, 1, &cfg, &streams, 0);
            update_critic(&mut n, &refs, 0.99).unwrap();
            update_safety_critic(&mut n, &refs).unwrap();
            n
        };
        prop_assert_eq!(run(), run());
    }
}

