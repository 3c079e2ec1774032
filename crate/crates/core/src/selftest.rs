//! Built-in checks runnable from the command line: finite-difference gradient
//! checks, penalty gating, metric oracles, risk bounds and overlay soundness.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use crate::agent::{actor_objective_gradient, critic_loss_gradient, safety_loss_gradient, AgentConfig, AgentNets, RiskProfile, Transition};
use crate::backtest::metrics;
use crate::env::{execute, EnvConfig, PortfolioState};
use crate::meta::{mac_loss_and_gradient, MacConfig, MacRecord};
use crate::nn::OutputActivation;
use crate::risk::{env_risk, overlay_validate, OverlayConfig, RiskConfig};
use crate::rng::{SeedStreams, Stream};
use crate::{Mlp, MlpGradients};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// Central differences of `f` with respect to every parameter of `net`.
pub fn finite_difference(net: &Mlp, h: f64, mut f: impl FnMut(&Mlp) -> f64) -> Vec<f64> {
    let n = net.param_count();
    let mut probe = net.clone();
    (0..n)
        .map(|k| {
            let orig = *probe.params().nth(k).unwrap();
            *probe.params_mut().nth(k).unwrap() = orig + h;
            let up = f(&probe);
            *probe.params_mut().nth(k).unwrap() = orig - h;
            let down = f(&probe);
            *probe.params_mut().nth(k).unwrap() = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

const FD_STEP: f64 = 1e-6;
const FD_FLOOR: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

/// One asset, three state features: actor 3-2-1, critics 4-2-1.
pub fn toy_agent(seed: u64) -> (AgentNets, Vec<Transition>) {
    let streams = SeedStreams::new(seed);
    let mut rng = streams.stream("selftest/data");
    let cfg = AgentConfig { hidden: vec![2], actor_final_bound: 0.5, ..Default::default() };
    let mut nets = AgentNets::new(3, 1, &cfg, &streams, 0);
    // targets differ from the online nets so the bootstrap term is exercised
    for p in nets.critic_target.params_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    let batch = (0..6)
        .map(|k| {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = vec![rng.random_range(-1.0..1.0)];
            Transition {
                state: Arc::new(s),
                proposed: vec![rng.random_range(-1.0..1.0)],
                action: a,
                reward: rng.random_range(-0.05..0.05),
                next_state: Arc::new(s2),
                done: k == 5,
                risk_label: rng.random_range(0.0..1.0),
            }
        })
        .collect();
    (nets, batch)
}

fn grad_check(name: &'static str, analytic: &MlpGradients, numeric: &[f64]) -> CheckResult {
    let err = max_relative_error(&analytic.flatten(), numeric, FD_FLOOR);
    CheckResult::new(name, err < FD_TOL, format!("max relative error {err:.2e}"))
}

pub fn check_critic_gradient(seed: u64) -> CheckResult {
    let (nets, batch) = toy_agent(seed);
    let refs: Vec<&Transition> = batch.iter().collect();
    let (_, g) = critic_loss_gradient(&nets, &refs, 0.99).unwrap();
    let numeric = finite_difference(&nets.critic, FD_STEP, |c| {
        let mut n = nets.clone();
        n.critic = c.clone();
        critic_loss_gradient(&n, &refs, 0.99).unwrap().0
    });
    grad_check("critic gradient", &g, &numeric)
}

pub fn check_safety_gradient(seed: u64) -> CheckResult {
    let (nets, batch) = toy_agent(seed);
    let refs: Vec<&Transition> = batch.iter().collect();
    let (_, g) = safety_loss_gradient(&nets, &refs).unwrap();
    let numeric = finite_difference(&nets.safety, FD_STEP, |c| {
        let mut n = nets.clone();
        n.safety = c.clone();
        safety_loss_gradient(&n, &refs).unwrap().0
    });
    grad_check("safety-critic gradient", &g, &numeric)
}

/// Actor gradient with the penalty switched on (threshold 0) against the
/// negated finite-difference slope of the objective.
pub fn check_actor_gradient(seed: u64) -> CheckResult {
    let (nets, batch) = toy_agent(seed);
    let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
    let profile = RiskProfile { theta: 0.0, lambda: 2.0, label: String::new() };
    let (_, g) = actor_objective_gradient(&nets, &states, &profile).unwrap();
    let numeric: Vec<f64> = finite_difference(&nets.actor, FD_STEP, |a| {
        let mut n = nets.clone();
        n.actor = a.clone();
        actor_objective_gradient(&n, &states, &profile).unwrap().0
    })
    .into_iter()
    .map(|x| -x)
    .collect();
    grad_check("actor gradient with penalty", &g, &numeric)
}

pub fn toy_mac(seed: u64) -> (Mlp, Vec<MacRecord>) {
    let streams = SeedStreams::new(seed);
    let mut rng = streams.stream("selftest/mac");
    let mac = Mlp::new(&[3, 2, 2], OutputActivation::Linear, None, &mut rng);
    let records = (0..8)
        .map(|_| MacRecord {
            state: Arc::new((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()),
            q: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..2).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();
    (mac, records)
}

pub fn check_mac_gradient(seed: u64) -> CheckResult {
    let (mac, records) = toy_mac(seed);
    let refs: Vec<&MacRecord> = records.iter().collect();
    let cfg = MacConfig::default();
    let (_, g) = mac_loss_and_gradient(&mac, &refs, &cfg).unwrap();
    let numeric = finite_difference(&mac, FD_STEP, |m| mac_loss_and_gradient(m, &refs, &cfg).unwrap().0);
    grad_check("controller gradient", &g, &numeric)
}

/// Inactive penalty must give the exact zero-lambda gradient; an active one
/// must change it.
pub fn check_csp_gating(seed: u64) -> CheckResult {
    let (nets, batch) = toy_agent(seed);
    let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
    let base = |theta| RiskProfile { theta, lambda: 0.0, label: String::new() };
    let with = |theta| RiskProfile { theta, lambda: 4.0, label: String::new() };
    // sigmoid output lies strictly inside (0, 1)
    let g_off = actor_objective_gradient(&nets, &states, &with(1.0)).unwrap().1;
    let g_zero = actor_objective_gradient(&nets, &states, &base(1.0)).unwrap().1;
    let inactive_same = g_off.flatten().iter().zip(g_zero.flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    let g_on = actor_objective_gradient(&nets, &states, &with(0.0)).unwrap().1;
    let g_on0 = actor_objective_gradient(&nets, &states, &base(0.0)).unwrap().1;
    let active_differs = g_on.flatten() != g_on0.flatten();
    CheckResult::new(
        "penalty gating",
        inactive_same && active_differs,
        format!("inactive bitwise equal: {inactive_same}, active term nonzero: {active_differs}"),
    )
}

/// Peak/trough drawdown over every ordered pair.
pub fn brute_force_mdd(values: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..values.len() {
        for j in i..values.len() {
            worst = worst.min(values[j] / values[i] - 1.0);
        }
    }
    worst
}

pub fn random_curve(rng: &mut Stream) -> Vec<f64> {
    let n = rng.random_range(2..=50);
    let mut v = rng.random_range(10.0..1000.0);
    (0..n)
        .map(|_| {
            let out = v;
            v *= 1.0 + rng.random_range(-0.08..0.08);
            out
        })
        .collect()
}

pub fn check_metric_oracles(seed: u64, cases: usize) -> CheckResult {
    let mut rng = SeedStreams::new(seed).stream("selftest/curves");
    let mut bad = 0;
    for _ in 0..cases {
        let v = random_curve(&mut rng);
        let m = metrics(&v, 252.0, 0.0).unwrap();
        if m.max_drawdown != brute_force_mdd(&v) {
            bad += 1;
        }
    }
    let hand = metrics::<f64>(&[100.0, 110.0, 99.0, 121.0], 252.0, 0.0).unwrap().max_drawdown;
    let hand_ok = (hand + 0.1).abs() < 1e-12;
    CheckResult::new("drawdown oracle", bad == 0 && hand_ok, format!("{bad} of {cases} curves disagree, hand case {hand}"))
}

/// Random book with holdings worth at most `cap + f` of its value per asset.
pub fn random_book(rng: &mut Stream, env: &EnvConfig, o: &OverlayConfig) -> PortfolioState {
    let d = rng.random_range(1..=6);
    let prices: Vec<f64> = (0..d).map(|_| rng.random_range(1.0..500.0)).collect();
    let v: f64 = rng.random_range(1e4..2e6);
    let mut cash = v;
    let mut holdings = vec![0.0; d];
    for i in 0..d {
        let frac = rng.random_range(0.0..(o.concentration_cap + env.max_trade_fraction));
        let shares = (frac * v / prices[i]).floor().min((cash / prices[i]).floor()).max(0.0);
        holdings[i] = shares;
        cash -= shares * prices[i];
    }
    PortfolioState { cash: cash.max(0.0), holdings, prices, t: 0, values: VecDeque::new() }
}

pub fn random_action(rng: &mut Stream, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| match rng.random_range(0..6) {
            0 => 1.0,
            1 => -1.0,
            2 => 0.0,
            _ => rng.random_range(-1.0..=1.0),
        })
        .collect()
}

/// Executes `action` at unchanged prices and reports the first violated rule.
pub fn constraint_violation(p: &PortfolioState, action: &[f64], env: &EnvConfig, o: &OverlayConfig) -> Option<String> {
    let v = p.value();
    let mut q = p.clone();
    let prices = p.prices.clone();
    execute(&mut q, action, &prices, env).ok()?;
    let top = prices.iter().copied().fold(0.0, f64::max);
    for (i, h) in q.holdings.iter().enumerate() {
        if *h < 0.0 {
            return Some(format!("asset {i} short"));
        }
        if h * prices[i] > o.concentration_cap * v + prices[i] {
            return Some(format!("asset {i} above cap"));
        }
    }
    if q.cash < o.cash_buffer * v - top {
        return Some(format!("cash {} below buffer", q.cash));
    }
    None
}

pub fn check_overlay(seed: u64, cases: usize) -> CheckResult {
    let mut rng = SeedStreams::new(seed).stream("selftest/overlay");
    let env = EnvConfig::default();
    let o = OverlayConfig::default();
    let mut failures = 0;
    let mut first = String::new();
    for _ in 0..cases {
        let p = random_book(&mut rng, &env, &o);
        let a = random_action(&mut rng, p.n_assets());
        let out = overlay_validate(&a, &p, &env, &o).unwrap();
        let again = overlay_validate(&out, &p, &env, &o).unwrap();
        let problem = constraint_violation(&p, &out, &env, &o).or_else(|| (again != out).then(|| "not idempotent".to_string()));
        if let Some(msg) = problem {
            failures += 1;
            if first.is_empty() {
                first = msg;
            }
        }
    }
    CheckResult::new("overlay soundness", failures == 0, format!("{failures} of {cases} cases fail {first}"))
}

pub fn check_env_risk_bounds(seed: u64, cases: usize) -> CheckResult {
    let mut rng = SeedStreams::new(seed).stream("selftest/risk");
    let env = EnvConfig::default();
    let o = OverlayConfig::default();
    let cfg = RiskConfig::default();
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    let mut bad = 0;
    for _ in 0..cases {
        let p = random_book(&mut rng, &env, &o);
        let d = p.n_assets();
        let returns: Vec<Vec<f64>> = (0..30).map(|_| (0..d).map(|_| rng.random_range(-0.1..0.1)).collect()).collect();
        let a = random_action(&mut rng, d);
        let s = env_risk(&p, &returns, &a, &env, &cfg).unwrap();
        if !(unit(s.total) && unit(s.concentration) && unit(s.leverage) && unit(s.simulated_volatility)) {
            bad += 1;
        }
    }
    let cash = PortfolioState { cash: 1e6, holdings: vec![0.0; 3], prices: vec![10.0, 20.0, 30.0], t: 0, values: VecDeque::new() };
    let flat = vec![vec![0.01, -0.01, 0.02]; 30];
    let zero = env_risk(&cash, &flat, &[0.0; 3], &env, &cfg).unwrap().total;
    CheckResult::new("risk score bounds", bad == 0 && zero == 0.0, format!("{bad} of {cases} out of range, all-cash total {zero}"))
}

/// Runs every check with a small budget.
pub fn run_all(seed: u64) -> Vec<(CheckResult, f64)> {
    let checks: Vec<Box<dyn Fn() -> CheckResult>> = vec![
        Box::new(move || check_actor_gradient(seed)),
        Box::new(move || check_critic_gradient(seed)),
        Box::new(move || check_safety_gradient(seed)),
        Box::new(move || check_mac_gradient(seed)),
        Box::new(move || check_csp_gating(seed)),
        Box::new(move || check_metric_oracles(seed, 1000)),
        Box::new(move || check_env_risk_bounds(seed, 2000)),
        Box::new(move || check_overlay(seed, 10_000)),
    ];
    checks
        .iter()
        .map(|c| {
            let t = Instant::now();
            let r = c();
            (r, t.elapsed().as_secs_f64())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtin_checks_pass() {
        for (r, _) in run_all(7) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn brute_force_mdd_hand_case() {
        assert!((brute_force_mdd(&[100.0, 110.0, 99.0, 121.0]) + 0.1).abs() < 1e-15);
        assert_eq!(brute_force_mdd(&[1.0, 2.0, 3.0]), 0.0);
    }
}
