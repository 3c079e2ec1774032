//! Environmental risk score and the compliance overlay.
//!
//! The score has three components in `[0, 1]`: HHI concentration with cash as
//! its own bucket, proximity to a fully invested book measured against the
//! cash buffer, and the simulated volatility of the post-trade weights over
//! the recent return window. The total is their weighted mean.
//!
//! The overlay turns an aggregated action into one that, once mapped to whole
//! shares at decision prices, bans shorting, caps every position at
//! `concentration_cap * V` and keeps `cash_buffer * V` in cash after costs.
//! Rules apply in that order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{target_shares, EnvConfig, PortfolioState};
use crate::scalar::{population_std, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("negative portfolio weight {0}")]
    NegativeWeight(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least 2 days of returns, have {0}")]
    InsufficientHistory(usize),
    #[error("action contains a non-finite entry")]
    NonFiniteAction,
    #[error("invalid risk config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayConfig {
    pub concentration_cap: f64,
    pub cash_buffer: f64,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self { concentration_cap: 0.20, cash_buffer: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub overlay: OverlayConfig,
    /// Daily volatility mapped to a score of 1.
    pub sigma_cap_daily: f64,
    /// Weights of (concentration, leverage, simulated volatility).
    pub component_weights: [f64; 3],
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self { overlay: OverlayConfig::default(), sigma_cap_daily: 0.025, component_weights: [1.0; 3] }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<(), RiskError> {
        let bad = |m: &str| Err(RiskError::InvalidConfig(m.into()));
        let o = &self.overlay;
        if !(o.concentration_cap > 0.0 && o.concentration_cap <= 1.0) {
            return bad("concentration cap must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&o.cash_buffer) {
            return bad("cash buffer must lie in [0, 1)");
        }
        if !(self.sigma_cap_daily > 0.0) {
            return bad("sigma cap must be positive");
        }
        let w = &self.component_weights;
        if w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return bad("component weights must be non-negative with a positive sum");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskScore {
    pub total: f64,
    pub concentration: f64,
    pub leverage: f64,
    pub simulated_volatility: f64,
}

fn clamp01<T: Scalar>(x: T) -> T {
    x.max(T::zero()).min(T::one())
}

/// Normalized HHI over invested weights plus the cash remainder.
///
/// An all-cash book scores 0. Weights summing above one are rescaled to one.
pub fn concentration_score<T: Scalar>(weights: &[T]) -> Result<T, RiskError> {
    if let Some(w) = weights.iter().find(|w| !(**w >= T::zero())) {
        return Err(RiskError::NegativeWeight(w.to_f64_lossy()));
    }
    let invested: T = weights.iter().copied().sum();
    if invested == T::zero() {
        return Ok(T::zero());
    }
    let scale = if invested > T::one() { invested } else { T::one() };
    let cash = T::one() - invested / scale;
    let hhi = weights.iter().map(|w| (*w / scale) * (*w / scale)).sum::<T>() + cash * cash;
    let floor = T::one() / T::from_usize(weights.len() + 1).unwrap();
    Ok(clamp01((hhi - floor) / (T::one() - floor)))
}

/// Leverage proximity from gross exposure `G` and equity `E`.
pub fn leverage_from_exposure<T: Scalar>(gross: T, equity: T, buffer: T) -> T {
    let ratio = gross / equity;
    if buffer <= T::zero() {
        return if ratio >= T::one() { T::one() } else { T::zero() };
    }
    clamp01((ratio - (T::one() - buffer)).max(T::zero()) / buffer)
}

/// `std(w . r_d) / sigma_cap` over the rows of `returns`, clamped to `[0, 1]`.
pub fn volatility_from_weights<T: Scalar>(weights: &[T], returns: &[Vec<T>], sigma_cap: T) -> Result<T, RiskError> {
    if returns.len() < 2 {
        return Err(RiskError::InsufficientHistory(returns.len()));
    }
    let mut port = Vec::with_capacity(returns.len());
    for row in returns {
        if row.len() != weights.len() {
            return Err(RiskError::ShapeMismatch(format!("return row has {} assets, weights {}", row.len(), weights.len())));
        }
        port.push(weights.iter().zip(row).map(|(w, r)| *w * *r).sum::<T>());
    }
    Ok(clamp01(population_std(&port) / sigma_cap))
}

fn check_action(action: &[f64], d: usize) -> Result<(), RiskError> {
    if action.len() != d {
        return Err(RiskError::ShapeMismatch(format!("action has {} entries for {d} assets", action.len())));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(RiskError::NonFiniteAction);
    }
    Ok(())
}

/// Post-trade position notionals at decision prices for a proposed action,
/// using the same share mapping as execution and never going short.
pub fn proposed_positions(p: &PortfolioState, action: &[f64], env: &EnvConfig) -> Result<Vec<f64>, RiskError> {
    check_action(action, p.n_assets())?;
    let v = p.value();
    Ok((0..p.n_assets())
        .map(|i| {
            let s = target_shares(action[i].clamp(-1.0, 1.0), env.max_trade_fraction, v, p.prices[i]);
            (p.holdings[i] + s.max(-p.holdings[i])) * p.prices[i]
        })
        .collect())
}

pub fn leverage_score(p: &PortfolioState, action: &[f64], env: &EnvConfig, cfg: &RiskConfig) -> Result<f64, RiskError> {
    let pos = proposed_positions(p, action, env)?;
    let gross: f64 = pos.iter().map(|x| x.abs()).sum();
    Ok(leverage_from_exposure(gross, p.value(), cfg.overlay.cash_buffer))
}

pub fn simulated_volatility_score(
    p: &PortfolioState,
    action: &[f64],
    returns: &[Vec<f64>],
    env: &EnvConfig,
    cfg: &RiskConfig,
) -> Result<f64, RiskError> {
    let v = p.value();
    let w: Vec<f64> = proposed_positions(p, action, env)?.iter().map(|x| x / v).collect();
    volatility_from_weights(&w, returns, cfg.sigma_cap_daily)
}

/// Weighted mean of the three components.
pub fn combine(components: [f64; 3], weights: [f64; 3]) -> f64 {
    let num: f64 = components.iter().zip(&weights).map(|(c, w)| c * w).sum();
    clamp01(num / weights.iter().sum::<f64>())
}

/// Risk of taking `action` from `p` given the recent asset returns.
pub fn env_risk(
    p: &PortfolioState,
    returns: &[Vec<f64>],
    action: &[f64],
    env: &EnvConfig,
    cfg: &RiskConfig,
) -> Result<RiskScore, RiskError> {
    let v = p.value();
    let pos = proposed_positions(p, action, env)?;
    let w: Vec<f64> = pos.iter().map(|x| x / v).collect();
    let concentration = concentration_score(&w)?;
    let leverage = leverage_from_exposure(pos.iter().map(|x| x.abs()).sum(), v, cfg.overlay.cash_buffer);
    let simulated_volatility = volatility_from_weights(&w, returns, cfg.sigma_cap_daily)?;
    let total = combine([concentration, leverage, simulated_volatility], cfg.component_weights);
    Ok(RiskScore { total, concentration, leverage, simulated_volatility })
}

/// Whole-share trades and resulting book at decision prices.
#[derive(Debug, Clone, PartialEq)]
pub struct PostTrade {
    pub shares: Vec<f64>,
    pub positions: Vec<f64>,
    /// Cash after trades and costs.
    pub cash: f64,
    pub value: f64,
}

fn cash_after(p: &PortfolioState, shares: &[f64], rate: f64) -> f64 {
    let mut flow = 0.0;
    let mut traded = 0.0;
    for i in 0..shares.len() {
        let n = shares[i] * p.prices[i];
        flow += n;
        traded += n.abs();
    }
    p.cash - flow - rate * traded
}

/// Book implied by executing `action` at decision prices.
pub fn post_trade(p: &PortfolioState, action: &[f64], env: &EnvConfig) -> PostTrade {
    let v = p.value();
    let shares: Vec<f64> = (0..p.n_assets())
        .map(|i| target_shares(action[i], env.max_trade_fraction, v, p.prices[i]).max(-p.holdings[i]))
        .collect();
    let positions = (0..shares.len()).map(|i| (p.holdings[i] + shares[i]) * p.prices[i]).collect();
    PostTrade { cash: cash_after(p, &shares, env.cost_rate), shares, positions, value: v }
}

/// Tolerance on the cap and buffer, relative to portfolio value.
pub const OVERLAY_TOL: f64 = 1e-9;

fn compliant(p: &PortfolioState, action: &[f64], env: &EnvConfig, o: &OverlayConfig) -> bool {
    let v = p.value();
    let tol = OVERLAY_TOL * v;
    let d = p.n_assets();
    let mut shares = Vec::with_capacity(d);
    for i in 0..d {
        if action[i].abs() > 1.0 {
            return false;
        }
        let s = target_shares(action[i], env.max_trade_fraction, v, p.prices[i]);
        if s < -p.holdings[i] || (p.holdings[i] + s) * p.prices[i] > o.concentration_cap * v + tol {
            return false;
        }
        shares.push(s);
    }
    cash_after(p, &shares, env.cost_rate) >= o.cash_buffer * v - tol
}

/// Returns an action satisfying the three overlay rules. Compliant input comes
/// back unchanged and the function is idempotent.
///
/// Corrections are made in whole shares: (1) sells are clipped to holdings,
/// (2) positions above the cap are trimmed, selling if already above it,
/// (3) buys are scaled down together until the cash buffer holds, and if that
/// is not enough, every position is sold down pro rata to its remaining
/// capacity. Trades stay within one maximum trade size, so a book too far out
/// of bounds may need several steps.
pub fn overlay_validate(
    action: &[f64],
    p: &PortfolioState,
    env: &EnvConfig,
    o: &OverlayConfig,
) -> Result<Vec<f64>, RiskError> {
    check_action(action, p.n_assets())?;
    if compliant(p, action, env, o) {
        return Ok(action.to_vec());
    }
    let d = p.n_assets();
    let v = p.value();
    let tol = OVERLAY_TOL * v;
    let rate = env.cost_rate;
    // largest whole-share trade reachable with |action| <= 1
    let max_shares: Vec<f64> = (0..d).map(|i| target_shares(1.0, env.max_trade_fraction, v, p.prices[i])).collect();

    // rule 1: no shorting
    let mut k: Vec<f64> = (0..d)
        .map(|i| {
            let a = action[i].clamp(-1.0, 1.0);
            target_shares(a, env.max_trade_fraction, v, p.prices[i]).max(-p.holdings[i])
        })
        .collect();

    // rule 2: concentration cap
    for i in 0..d {
        let cap_shares = ((o.concentration_cap * v + tol) / p.prices[i]).floor();
        if p.holdings[i] + k[i] > cap_shares {
            k[i] = (cap_shares - p.holdings[i]).max(-max_shares[i]).max(-p.holdings[i]);
        }
    }

    // rule 3: cash buffer
    let need = o.cash_buffer * v - cash_after(p, &k, rate);
    if need > tol {
        let buys: f64 = (0..d).filter(|&i| k[i] > 0.0).map(|i| k[i] * p.prices[i] * (1.0 + rate)).sum();
        if buys > 0.0 {
            let keep = ((buys - need) / buys).max(0.0);
            for x in k.iter_mut().filter(|x| **x > 0.0) {
                *x = (*x * keep).floor();
            }
        }
        let need = o.cash_buffer * v - cash_after(p, &k, rate);
        if need > tol {
            // additional shares each asset can still sell
            let room: Vec<f64> = (0..d).map(|i| (p.holdings[i] + k[i]).min(max_shares[i] + k[i]).max(0.0)).collect();
            let proceeds: f64 = (0..d).map(|i| room[i] * p.prices[i] * (1.0 - rate)).sum();
            if proceeds > 0.0 {
                let phi = (need / proceeds).min(1.0);
                for i in 0..d {
                    k[i] -= (phi * room[i]).ceil().min(room[i]);
                }
            }
        }
    }

    let out: Vec<f64> = (0..d)
        .map(|i| if k[i] == 0.0 { 0.0 } else { (k[i] * p.prices[i] / (env.max_trade_fraction * v)).clamp(-1.0, 1.0) })
        .collect();
    debug_assert!(out.iter().zip(&k).enumerate().all(|(i, (a, s))| target_shares(*a, env.max_trade_fraction, v, p.prices[i]) == *s));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn book(cash: f64, holdings: Vec<f64>, prices: Vec<f64>) -> PortfolioState {
        PortfolioState { cash, holdings, prices, t: 0, values: VecDeque::new() }
    }

    #[test]
    fn concentration_anchors() {
        assert_eq!(concentration_score(&[1.0, 0.0]).unwrap(), 1.0);
        let third = 1.0 / 3.0;
        assert!(concentration_score::<f64>(&[third, third]).unwrap().abs() < 1e-15);
        assert_eq!(concentration_score(&[0.5]).unwrap(), 0.0);
        assert_eq!(concentration_score(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(concentration_score(&[-0.1]), Err(RiskError::NegativeWeight(_))));
        assert_eq!(concentration_score(&[1.0f32, 0.0]).unwrap(), 1.0f32);
    }

    #[test]
    fn leverage_anchors() {
        assert_eq!(leverage_from_exposure(0.0, 1.0, 0.05), 0.0);
        assert_eq!(leverage_from_exposure(1.0, 1.0, 0.05), 1.0);
        assert!((leverage_from_exposure::<f64>(0.975, 1.0, 0.05) - 0.5).abs() < 1e-12);
        assert_eq!(leverage_from_exposure(0.99, 1.0, 0.0), 0.0);
        assert_eq!(leverage_from_exposure(1.0, 1.0, 0.0), 1.0);
    }

    #[test]
    fn volatility_anchors() {
        let flat = vec![vec![0.01, 0.0]; 5];
        assert_eq!(volatility_from_weights(&[1.0, 0.0], &flat, 0.025).unwrap(), 0.0);
        let r = vec![vec![0.01, 0.3], vec![-0.01, 0.1], vec![0.02, -0.2], vec![0.0, 0.0]];
        assert_eq!(volatility_from_weights(&[0.0, 0.0], &r, 0.025).unwrap(), 0.0);
        // mean 0.005; deviations .005 -.015 .015 -.005; var = (25+225+225+25)e-6/4 = 125e-6
        let want = 125e-6f64.sqrt() / 0.025;
        assert!((volatility_from_weights::<f64>(&[1.0, 0.0], &r, 0.025).unwrap() - want).abs() < 1e-12);
        assert!(matches!(volatility_from_weights(&[1.0], &r[..1], 0.025), Err(RiskError::InsufficientHistory(1))));
    }

    #[test]
    fn combine_is_weighted_mean() {
        assert!((combine([0.0, 0.5, 0.25], [1.0; 3]) - 0.25).abs() < 1e-15);
        assert_eq!(combine([1.0; 3], [1.0; 3]), 1.0);
        assert_eq!(combine([1.0, 0.0, 0.0], [2.0, 1.0, 1.0]), 0.5);
    }

    #[test]
    fn all_cash_zero_action_has_zero_risk() {
        let p = book(1e6, vec![0.0, 0.0], vec![10.0, 20.0]);
        let r = vec![vec![0.01, -0.02], vec![0.03, 0.01], vec![-0.01, 0.0]];
        let s = env_risk(&p, &r, &[0.0, 0.0], &EnvConfig::default(), &RiskConfig::default()).unwrap();
        assert_eq!(s.total, 0.0);
    }

    #[test]
    fn compliant_action_is_returned_bitwise() {
        let p = book(1e6, vec![0.0, 0.0], vec![10.0, 20.0]);
        let a = vec![0.37, 0.123456789];
        let out = overlay_validate(&a, &p, &EnvConfig::default(), &OverlayConfig::default()).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn oversell_is_clipped_to_holdings() {
        // holding 1000 shares at 10 = 1e4; sell request of 2e4
        let p = book(99e4, vec![1000.0], vec![10.0]);
        let env = EnvConfig::default();
        let a = [-2e4 / (0.1 * 1e6)];
        let out = overlay_validate(&a, &p, &env, &OverlayConfig::default()).unwrap();
        let pt = post_trade(&p, &out, &env);
        assert_eq!(pt.shares, vec![-1000.0]);
    }

    #[test]
    fn buy_over_cap_is_trimmed_to_cap() {
        // 10% already held, a full 10% buy plus 10% more would reach 30%
        let env = EnvConfig { max_trade_fraction: 0.2, cost_rate: 0.0, ..Default::default() };
        let p = book(9e5, vec![1000.0, 0.0], vec![100.0, 50.0]);
        let out = overlay_validate(&[1.0, 0.0], &p, &env, &OverlayConfig::default()).unwrap();
        let pt = post_trade(&p, &out, &env);
        assert_eq!(pt.positions[0], 0.2 * 1e6);
        assert!(out[0] < 1.0);
    }

    #[test]
    fn cash_shortfall_scales_buys_then_sells() {
        let env = EnvConfig { max_trade_fraction: 0.1, cost_rate: 0.001, ..Default::default() };
        let o = OverlayConfig::default();
        let p = book(60_000.0, vec![1900.0, 1900.0, 1900.0, 1900.0, 1900.0], vec![100.0; 5]);
        let out = overlay_validate(&[1.0, 1.0, 0.0, 0.0, 0.0], &p, &env, &o).unwrap();
        let pt = post_trade(&p, &out, &env);
        assert!(pt.cash >= o.cash_buffer * pt.value - 1e-6);
        // low cash forces sells when there is nothing left to scale
        let p = book(10_000.0, vec![1980.0; 5], vec![100.0; 5]);
        let out = overlay_validate(&[0.0; 5], &p, &env, &o).unwrap();
        let pt = post_trade(&p, &out, &env);
        assert!(pt.cash >= o.cash_buffer * pt.value - 1e-6);
        assert!(out.iter().all(|a| *a <= 0.0));
        assert_eq!(overlay_validate(&out, &p, &env, &o).unwrap(), out);
    }

    #[test]
    fn overlay_rejects_nan() {
        let p = book(1.0, vec![0.0], vec![1.0]);
        let err = overlay_validate(&[f64::NAN], &p, &EnvConfig::default(), &OverlayConfig::default());
        assert_eq!(err, Err(RiskError::NonFiniteAction));
    }
}
