//! Portfolio MDP: state vectors, trade execution and the risk-penalized reward.
//!
//! Timeline: the agent observes day `t` (features and close), the trade is
//! sized at the day-`t` close and filled at the day-`t+1` close. Sells settle
//! before buys. Transaction costs are paid out of cash and also enter the
//! reward as the dimensionless term `C_t = rate * traded_notional / V_t`.
//!
//! State layout (length `1 + D + D*K`):
//! `[cash / V0, h_1 * p_1 / V0, ..., h_D * p_D / V0, x_1 (K features), ..., x_D]`.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{MarketTable, NormStats, FEATURES_PER_ASSET};
use crate::scalar::{population_std, simple_returns, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("need at least {required} dates, have {available}")]
    InsufficientData { required: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("action contains a non-finite entry")]
    NonFiniteAction,
    #[error("action entry {0} outside [-1, 1]")]
    ActionOutOfRange(f64),
    #[error("episode already finished")]
    EpisodeDone,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub initial_cash: f64,
    /// Fraction of traded notional.
    pub cost_rate: f64,
    /// Largest trade per asset per step as a fraction of `V_t`.
    pub max_trade_fraction: f64,
    pub w_vol: f64,
    pub w_dd: f64,
    /// Rolling window in days for the reward penalty and return history.
    pub window: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { initial_cash: 1e6, cost_rate: 0.001, max_trade_fraction: 0.1, w_vol: 0.5, w_dd: 2.0, window: 30 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if !(self.initial_cash > 0.0) {
            return bad("initial cash must be positive");
        }
        if !(0.0..=0.05).contains(&self.cost_rate) {
            return bad("cost rate must lie in [0, 0.05]");
        }
        if !(self.max_trade_fraction > 0.0 && self.max_trade_fraction <= 1.0) {
            return bad("max trade fraction must lie in (0, 1]");
        }
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if self.w_vol < 0.0 || self.w_dd < 0.0 {
            return bad("penalty weights must be non-negative");
        }
        Ok(())
    }
}

/// Cash, share holdings and the rolling value history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioState {
    pub cash: f64,
    pub holdings: Vec<f64>,
    /// Close on the current date.
    pub prices: Vec<f64>,
    /// Index of the current date within the episode data.
    pub t: usize,
    /// Most recent portfolio values, oldest first, at most `window + 1` long.
    pub values: VecDeque<f64>,
}

impl PortfolioState {
    pub fn all_cash(cash: f64, prices: Vec<f64>, t: usize) -> Self {
        let d = prices.len();
        Self { cash, holdings: vec![0.0; d], prices, t, values: VecDeque::from([cash]) }
    }

    pub fn n_assets(&self) -> usize {
        self.holdings.len()
    }

    /// `b + sum(h * p)` at the current prices.
    pub fn value(&self) -> f64 {
        self.cash + self.positions().iter().sum::<f64>()
    }

    /// Notional per asset at the current prices.
    pub fn positions(&self) -> Vec<f64> {
        self.holdings.iter().zip(&self.prices).map(|(h, p)| h * p).collect()
    }
}

/// Rolling risk penalty `w_vol * sigma + w_dd * drawdown`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskPenalty<T> {
    /// Population std of simple returns (not annualized).
    pub sigma: T,
    /// Largest peak-to-trough decline as a positive fraction.
    pub drawdown: T,
    pub rho: T,
}

pub fn max_drawdown_fraction<T: Scalar>(values: &[T]) -> T {
    let mut peak = T::neg_infinity();
    let mut worst = T::zero();
    for &v in values {
        peak = peak.max(v);
        let dd = (peak - v) / peak;
        worst = worst.max(dd);
    }
    worst
}

/// Penalty over the value window. Fewer than two values give zero.
pub fn risk_penalty<T: Scalar>(values: &[T], w_vol: T, w_dd: T) -> RiskPenalty<T> {
    if values.len() < 2 {
        return RiskPenalty { sigma: T::zero(), drawdown: T::zero(), rho: T::zero() };
    }
    let sigma = population_std(&simple_returns(values));
    let drawdown = max_drawdown_fraction(values);
    RiskPenalty { sigma, drawdown, rho: w_vol * sigma + w_dd * drawdown }
}

/// Truncates toward zero, snapping values within `1e-9` of an integer first so
/// that a notional computed back from a share count maps to the same count.
pub fn whole_shares(raw: f64) -> f64 {
    let r = raw.round();
    if (raw - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        raw.trunc()
    }
}

/// Share count implied by one action entry.
pub fn target_shares(action: f64, max_trade_fraction: f64, value: f64, price: f64) -> f64 {
    whole_shares(action * max_trade_fraction * value / price)
}

/// Accounting result of one executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub value_before: f64,
    pub value_after: f64,
    /// Signed share counts actually traded.
    pub trades: Vec<f64>,
    pub cost: f64,
    pub rho: f64,
    pub sigma: f64,
    pub drawdown: f64,
    pub reward: f64,
    pub cash_after: f64,
}

fn check_action(action: &[f64], d: usize) -> Result<(), EnvError> {
    if action.len() != d {
        return Err(EnvError::ShapeMismatch(format!("action has {} entries for {d} assets", action.len())));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(EnvError::NonFiniteAction);
    }
    if let Some(a) = action.iter().find(|a| a.abs() > 1.0) {
        return Err(EnvError::ActionOutOfRange(*a));
    }
    Ok(())
}

/// Executes `action` against `p`, filling at `prices_next`, and advances the
/// portfolio to the next date.
pub fn execute(
    p: &mut PortfolioState,
    action: &[f64],
    prices_next: &[f64],
    config: &EnvConfig,
) -> Result<Execution, EnvError> {
    let d = p.n_assets();
    check_action(action, d)?;
    if prices_next.len() != d {
        return Err(EnvError::ShapeMismatch(format!("{} next prices for {d} assets", prices_next.len())));
    }
    let v0 = p.value();
    let rate = config.cost_rate;

    let mut trades: Vec<f64> = (0..d)
        .map(|i| target_shares(action[i], config.max_trade_fraction, v0, p.prices[i]))
        .collect();
    for i in 0..d {
        if trades[i] < 0.0 {
            trades[i] = trades[i].max(-p.holdings[i]);
        }
    }

    // sells
    let mut sell_notional = 0.0;
    for i in 0..d {
        if trades[i] < 0.0 {
            sell_notional += -trades[i] * prices_next[i];
        }
    }
    let mut cash = p.cash + (sell_notional - rate * sell_notional);

    // buys, scaled down together when cash is short
    let buy_total = |trades: &[f64]| -> f64 {
        (0..d).filter(|&i| trades[i] > 0.0).map(|i| trades[i] * prices_next[i]).sum()
    };
    let mut buy_notional = buy_total(&trades);
    if buy_notional * (1.0 + rate) > cash {
        let k = (cash / (buy_notional * (1.0 + rate))).max(0.0);
        for t in trades.iter_mut().filter(|t| **t > 0.0) {
            *t = (*t * k).floor();
        }
        buy_notional = buy_total(&trades);
        while buy_notional + rate * buy_notional > cash {
            // rounding residue: drop one share from the largest buy
            let i = (0..d)
                .filter(|&i| trades[i] > 0.0)
                .max_by(|&a, &b| (trades[a] * prices_next[a]).total_cmp(&(trades[b] * prices_next[b])))
                .expect("positive buy notional implies a buy");
            trades[i] -= 1.0;
            buy_notional = buy_total(&trades);
        }
    }
    let buy_out = buy_notional + rate * buy_notional;
    cash -= buy_out;

    for i in 0..d {
        p.holdings[i] += trades[i];
        if p.holdings[i] < 0.0 {
            p.holdings[i] = 0.0;
        }
    }
    p.cash = cash;
    p.prices = prices_next.to_vec();
    p.t += 1;
    let v1 = p.value();

    p.values.push_back(v1);
    while p.values.len() > config.window + 1 {
        p.values.pop_front();
    }
    let window: Vec<f64> = p.values.iter().copied().collect();
    let pen = risk_penalty(&window, config.w_vol, config.w_dd);
    let cost = rate * (sell_notional + buy_notional) / v0;
    let reward = (v1 - v0) / v0 - cost - pen.rho;
    Ok(Execution {
        value_before: v0,
        value_after: v1,
        trades,
        cost,
        rho: pen.rho,
        sigma: pen.sigma,
        drawdown: pen.drawdown,
        reward,
        cash_after: cash,
    })
}

/// Builds the flat state vector from a portfolio and the normalized feature
/// block for its current date.
pub fn build_state(p: &PortfolioState, features: &[f64], initial_value: f64) -> Result<Vec<f64>, EnvError> {
    let d = p.n_assets();
    if features.len() != d * FEATURES_PER_ASSET {
        return Err(EnvError::ShapeMismatch(format!(
            "feature block has {} entries, expected {}",
            features.len(),
            d * FEATURES_PER_ASSET
        )));
    }
    let mut s = Vec::with_capacity(state_dim(d));
    s.push(p.cash / initial_value);
    s.extend(p.positions().iter().map(|x| x / initial_value));
    s.extend_from_slice(features);
    Ok(s)
}

pub fn state_dim(n_assets: usize) -> usize {
    1 + n_assets + n_assets * FEATURES_PER_ASSET
}

/// Prices and normalized features for one contiguous span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvData {
    pub symbols: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// `prices[t][asset]`, closes.
    pub prices: Vec<Vec<f64>>,
    /// `features[t]`, normalized, `D * K` entries row-major by asset.
    pub features: Vec<Vec<f64>>,
}

impl EnvData {
    pub fn new(table: &MarketTable, norm: &NormStats) -> Self {
        Self {
            symbols: table.symbols.clone(),
            dates: table.dates.clone(),
            prices: (0..table.len()).map(|t| table.closes(t)).collect(),
            features: norm.transform(table),
        }
    }

    pub fn n_assets(&self) -> usize {
        self.symbols.len()
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Simple asset returns for the `window` days ending at `t`, `[day][asset]`.
    pub fn return_window(&self, t: usize, window: usize) -> Vec<Vec<f64>> {
        let from = t.saturating_sub(window);
        (from + 1..=t)
            .map(|k| self.prices[k].iter().zip(&self.prices[k - 1]).map(|(a, b)| a / b - 1.0).collect())
            .collect()
    }
}

/// Full environment output of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub execution: Execution,
    pub done: bool,
    pub date: NaiveDate,
}

/// Episode driver over [`EnvData`].
#[derive(Debug, Clone)]
pub struct PortfolioEnv {
    pub config: EnvConfig,
    pub data: Arc<EnvData>,
    pub portfolio: PortfolioState,
}

impl PortfolioEnv {
    /// All-cash start on the first date with a full return window behind it.
    pub fn reset(config: EnvConfig, data: Arc<EnvData>) -> Result<(Self, Vec<f64>), EnvError> {
        config.validate()?;
        let required = config.window + 2;
        if data.len() < required {
            return Err(EnvError::InsufficientData { required, available: data.len() });
        }
        let t0 = config.window;
        let portfolio = PortfolioState::all_cash(config.initial_cash, data.prices[t0].clone(), t0);
        let env = Self { config, data, portfolio };
        let s = env.state()?;
        Ok((env, s))
    }

    pub fn state(&self) -> Result<Vec<f64>, EnvError> {
        build_state(&self.portfolio, &self.data.features[self.portfolio.t], self.config.initial_cash)
    }

    pub fn t(&self) -> usize {
        self.portfolio.t
    }

    pub fn date(&self) -> NaiveDate {
        self.data.dates[self.portfolio.t]
    }

    pub fn is_done(&self) -> bool {
        self.portfolio.t + 1 >= self.data.len()
    }

    /// Number of steps in a full episode.
    pub fn episode_len(&self) -> usize {
        self.data.len() - self.config.window - 1
    }

    pub fn return_window(&self) -> Vec<Vec<f64>> {
        self.data.return_window(self.portfolio.t, self.config.window)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeDone);
        }
        let next = self.portfolio.t + 1;
        let prices_next = self.data.prices[next].clone();
        let execution = execute(&mut self.portfolio, action, &prices_next, &self.config)?;
        Ok(StepOutcome { next_state: self.state()?, execution, done: self.is_done(), date: self.data.dates[next] })
    }
}

pub const STEP_TRACE_HEADER: &str = "step,date,V,R,C,rho,cash";

/// Appends one `step,date,V,R,C,rho,cash` row.
pub fn write_step_row<W: Write>(w: &mut W, step: usize, outcome: &StepOutcome) -> std::io::Result<()> {
    let e = &outcome.execution;
    writeln!(w, "{step},{},{},{},{},{},{}", outcome.date, e.value_after, e.reward, e.cost, e.rho, e.cash_after)
}
