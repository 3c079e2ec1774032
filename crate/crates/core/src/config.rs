//! Experiment configuration as a flat set of dotted keys.
//!
//! A config file is TOML; nested tables and dotted keys are flattened to the
//! same key names, e.g. `[env] cost_rate = 0.001` and `env.cost_rate = 0.001`
//! are equivalent. Unknown keys are errors. Command-line overrides go through
//! the same setter as file entries.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::data::{CoveragePolicy, DateSpan, SynthConfig};
use crate::env::EnvConfig;
use crate::meta::MacConfig;
use crate::risk::RiskConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("override {0:?} is not of the form key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ensemble layout used for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Heterogeneous ensemble with a trained controller.
    Full,
    /// Heterogeneous ensemble with fixed uniform weights.
    Static,
    /// One profile and one parameter seed replicated across all agents.
    Homogeneous,
    /// Full system with `K` agents on a re-spaced grid.
    Div(usize),
    /// Full system with `N` agents.
    Custom(usize),
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let count = |t: &str| -> Result<usize, String> {
            match t.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(format!("agent count in {s:?} must be a positive integer")),
            }
        };
        match s {
            "full" => Ok(Variant::Full),
            "static" => Ok(Variant::Static),
            "homogeneous" => Ok(Variant::Homogeneous),
            _ => {
                if let Some(k) = s.strip_prefix("div") {
                    Ok(Variant::Div(count(k)?))
                } else if let Some(n) = s.strip_prefix("custom-") {
                    Ok(Variant::Custom(count(n)?))
                } else {
                    Err(format!("unknown variant {s:?}; expected full, static, homogeneous, divK or custom-N"))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::Static => "static".into(),
            Variant::Homogeneous => "homogeneous".into(),
            Variant::Div(k) => format!("div{k}"),
            Variant::Custom(n) => format!("custom-{n}"),
        }
    }

    pub fn uses_controller(&self) -> bool {
        !matches!(self, Variant::Static)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// OHLCV CSV; `None` means the synthetic generator.
    pub path: Option<PathBuf>,
    pub coverage: CoveragePolicy,
    pub train_span: Option<DateSpan>,
    pub validation_span: Option<DateSpan>,
    pub test_span: Option<DateSpan>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, coverage: CoveragePolicy::Reject, train_span: None, validation_span: None, test_span: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileConfig {
    pub theta_min: f64,
    pub theta_max: f64,
    /// Penalty weight of the most conservative agent.
    pub lambda_max: f64,
    /// Penalty weight of the most aggressive agent.
    pub lambda_min: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { theta_min: 0.15, theta_max: 0.85, lambda_max: 8.0, lambda_min: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_agents: usize,
    pub max_episodes: usize,
    pub seed: u64,
    pub variant: Variant,
    pub output_dir: PathBuf,
    /// Per-episode checkpoint directories kept on disk besides `initial` and `final`.
    pub keep_checkpoints: usize,
    pub save_resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_agents: 10,
            max_episodes: 30,
            seed: 42,
            variant: Variant::Full,
            output_dir: PathBuf::from("runs/default"),
            keep_checkpoints: 2,
            save_resume: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BacktestConfig {
    pub risk_free_rate: f64,
    pub periods_per_year: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self { risk_free_rate: 0.0, periods_per_year: 252.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub env: EnvConfig,
    pub risk: RiskConfig,
    pub agent: AgentConfig,
    pub profiles: ProfileConfig,
    pub mac: MacConfig,
    pub mac_hidden: Vec<usize>,
    pub train: TrainConfig,
    pub backtest: BacktestConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            env: EnvConfig::default(),
            risk: RiskConfig::default(),
            agent: AgentConfig::default(),
            profiles: ProfileConfig::default(),
            mac: MacConfig::default(),
            mac_hidden: vec![256, 128, 64],
            train: TrainConfig::default(),
            backtest: BacktestConfig::default(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data.path", "OHLCV CSV file; empty selects the synthetic generator"),
    ("data.coverage", "reject | exclude symbols missing dates"),
    ("data.train_span", "YYYY-MM-DD..YYYY-MM-DD; empty uses the first 70% of dates"),
    ("data.validation_span", "YYYY-MM-DD..YYYY-MM-DD; empty uses the next 15%"),
    ("data.test_span", "YYYY-MM-DD..YYYY-MM-DD; empty uses the last 15%"),
    ("synth.seed", "generator seed"),
    ("synth.n_assets", "number of synthetic assets"),
    ("synth.n_days", "number of synthetic trading days"),
    ("synth.start_date", "first synthetic date"),
    ("synth.initial_price", "starting price of every asset"),
    ("synth.correlation", "loading on the shared market factor in [0, 1]"),
    ("synth.regimes", "start:drift:vol;... daily log-drift and volatility schedule"),
    ("env.initial_cash", "starting cash"),
    ("env.cost_rate", "transaction cost as a fraction of traded notional"),
    ("env.max_trade_fraction", "largest trade per asset per step as a fraction of V"),
    ("env.w_vol", "weight of rolling volatility in the reward penalty"),
    ("env.w_dd", "weight of rolling drawdown in the reward penalty"),
    ("env.window", "rolling window in days"),
    ("risk.concentration_cap", "largest position as a fraction of V"),
    ("risk.cash_buffer", "smallest cash balance as a fraction of V"),
    ("risk.sigma_cap_daily", "daily volatility that scores 1"),
    ("risk.component_weights", "concentration,leverage,volatility weights"),
    ("agent.hidden", "hidden layer widths, comma separated"),
    ("agent.actor_lr", "actor learning rate"),
    ("agent.critic_lr", "critic learning rate"),
    ("agent.safety_lr", "safety-critic learning rate"),
    ("agent.tau", "target network averaging rate"),
    ("agent.gamma", "discount factor"),
    ("agent.buffer_capacity", "replay capacity per agent"),
    ("agent.batch_size", "minibatch size per agent update"),
    ("agent.noise_initial", "exploration std in the first episode"),
    ("agent.noise_decay", "per-episode exploration decay factor"),
    ("agent.noise_floor", "smallest exploration std"),
    ("agent.actor_final_bound", "uniform init bound of the actor output layer"),
    ("profile.theta_min", "risk tolerance of the most conservative agent"),
    ("profile.theta_max", "risk tolerance of the most aggressive agent"),
    ("profile.lambda_max", "penalty weight of the most conservative agent"),
    ("profile.lambda_min", "penalty weight of the most aggressive agent"),
    ("mac.lambda_meta", "risk weight in the controller loss"),
    ("mac.eps", "denominator stabilizer in the controller loss"),
    ("mac.train_freq", "episodes between controller training rounds"),
    ("mac.buffer_capacity", "controller record capacity"),
    ("mac.batch_size", "controller minibatch size"),
    ("mac.lr", "controller learning rate"),
    ("mac.steps_per_update", "controller gradient steps per training round"),
    ("mac.hidden", "controller hidden layer widths, comma separated"),
    ("train.n_agents", "ensemble size for the full and static variants"),
    ("train.max_episodes", "training episodes"),
    ("train.seed", "master seed"),
    ("train.variant", "full | static | homogeneous | divK | custom-N"),
    ("train.output_dir", "directory for checkpoints, traces and the manifest"),
    ("train.keep_checkpoints", "per-episode checkpoints kept besides initial and final"),
    ("train.save_resume", "write resume.json after every episode"),
    ("backtest.risk_free_rate", "annual risk-free rate in the Sharpe ratio"),
    ("backtest.periods_per_year", "trading days per year"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_span(key: &str, value: &str) -> Result<Option<DateSpan>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(None);
    }
    DateSpan::parse(value).map(Some).map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn span_text(s: &Option<DateSpan>) -> String {
    s.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl ExperimentConfig {
    /// Effective number of agents for the configured variant.
    pub fn n_agents(&self) -> usize {
        match self.train.variant {
            Variant::Div(k) | Variant::Custom(k) => k,
            _ => self.train.n_agents,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        let bad = |reason: String| ConfigError::InvalidValue { key: key.into(), value: v.into(), reason };
        match key {
            "data.path" => self.data.path = if v.trim().is_empty() { None } else { Some(PathBuf::from(v.trim())) },
            "data.coverage" => {
                self.data.coverage = match v.trim() {
                    "reject" => CoveragePolicy::Reject,
                    "exclude" => CoveragePolicy::Exclude,
                    _ => return Err(bad("expected reject or exclude".into())),
                }
            }
            "data.train_span" => self.data.train_span = parse_span(key, v)?,
            "data.validation_span" => self.data.validation_span = parse_span(key, v)?,
            "data.test_span" => self.data.test_span = parse_span(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "synth.n_assets" => self.synth.n_assets = parse(key, v)?,
            "synth.n_days" => self.synth.n_days = parse(key, v)?,
            "synth.start_date" => {
                self.synth.start_date = NaiveDate::parse_from_str(v.trim(), "%Y-%m-%d").map_err(|e| bad(e.to_string()))?
            }
            "synth.initial_price" => self.synth.initial_price = parse(key, v)?,
            "synth.correlation" => self.synth.correlation = parse(key, v)?,
            "synth.regimes" => self.synth.regimes = SynthConfig::parse_regimes(v).map_err(bad)?,
            "env.initial_cash" => self.env.initial_cash = parse(key, v)?,
            "env.cost_rate" => self.env.cost_rate = parse(key, v)?,
            "env.max_trade_fraction" => self.env.max_trade_fraction = parse(key, v)?,
            "env.w_vol" => self.env.w_vol = parse(key, v)?,
            "env.w_dd" => self.env.w_dd = parse(key, v)?,
            "env.window" => self.env.window = parse(key, v)?,
            "risk.concentration_cap" => self.risk.overlay.concentration_cap = parse(key, v)?,
            "risk.cash_buffer" => self.risk.overlay.cash_buffer = parse(key, v)?,
            "risk.sigma_cap_daily" => self.risk.sigma_cap_daily = parse(key, v)?,
            "risk.component_weights" => {
                let w: Vec<f64> = parse_list(key, v)?;
                self.risk.component_weights = w.try_into().map_err(|_| bad("expected three weights".into()))?;
            }
            "agent.hidden" => self.agent.hidden = parse_list(key, v)?,
            "agent.actor_lr" => self.agent.actor_lr = parse(key, v)?,
            "agent.critic_lr" => self.agent.critic_lr = parse(key, v)?,
            "agent.safety_lr" => self.agent.safety_lr = parse(key, v)?,
            "agent.tau" => self.agent.tau = parse(key, v)?,
            "agent.gamma" => self.agent.gamma = parse(key, v)?,
            "agent.buffer_capacity" => self.agent.buffer_capacity = parse(key, v)?,
            "agent.batch_size" => self.agent.batch_size = parse(key, v)?,
            "agent.noise_initial" => self.agent.noise_initial = parse(key, v)?,
            "agent.noise_decay" => self.agent.noise_decay = parse(key, v)?,
            "agent.noise_floor" => self.agent.noise_floor = parse(key, v)?,
            "agent.actor_final_bound" => self.agent.actor_final_bound = parse(key, v)?,
            "profile.theta_min" => self.profiles.theta_min = parse(key, v)?,
            "profile.theta_max" => self.profiles.theta_max = parse(key, v)?,
            "profile.lambda_max" => self.profiles.lambda_max = parse(key, v)?,
            "profile.lambda_min" => self.profiles.lambda_min = parse(key, v)?,
            "mac.lambda_meta" => self.mac.lambda_meta = parse(key, v)?,
            "mac.eps" => self.mac.eps = parse(key, v)?,
            "mac.train_freq" => self.mac.train_freq = parse(key, v)?,
            "mac.buffer_capacity" => self.mac.buffer_capacity = parse(key, v)?,
            "mac.batch_size" => self.mac.batch_size = parse(key, v)?,
            "mac.lr" => self.mac.lr = parse(key, v)?,
            "mac.steps_per_update" => self.mac.steps_per_update = parse(key, v)?,
            "mac.hidden" => self.mac_hidden = parse_list(key, v)?,
            "train.n_agents" => self.train.n_agents = parse(key, v)?,
            "train.max_episodes" => self.train.max_episodes = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.variant" => self.train.variant = Variant::parse(v).map_err(bad)?,
            "train.output_dir" => self.train.output_dir = PathBuf::from(v.trim()),
            "train.keep_checkpoints" => self.train.keep_checkpoints = parse(key, v)?,
            "train.save_resume" => self.train.save_resume = parse(key, v)?,
            "backtest.risk_free_rate" => self.backtest.risk_free_rate = parse(key, v)?,
            "backtest.periods_per_year" => self.backtest.periods_per_year = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let path = self.data.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let coverage = match self.data.coverage {
            CoveragePolicy::Reject => "reject",
            CoveragePolicy::Exclude => "exclude",
        };
        let values: Vec<String> = vec![
            path,
            coverage.into(),
            span_text(&self.data.train_span),
            span_text(&self.data.validation_span),
            span_text(&self.data.test_span),
            self.synth.seed.to_string(),
            self.synth.n_assets.to_string(),
            self.synth.n_days.to_string(),
            self.synth.start_date.to_string(),
            self.synth.initial_price.to_string(),
            self.synth.correlation.to_string(),
            SynthConfig::format_regimes(&self.synth.regimes),
            self.env.initial_cash.to_string(),
            self.env.cost_rate.to_string(),
            self.env.max_trade_fraction.to_string(),
            self.env.w_vol.to_string(),
            self.env.w_dd.to_string(),
            self.env.window.to_string(),
            self.risk.overlay.concentration_cap.to_string(),
            self.risk.overlay.cash_buffer.to_string(),
            self.risk.sigma_cap_daily.to_string(),
            join(&self.risk.component_weights),
            join(&self.agent.hidden),
            self.agent.actor_lr.to_string(),
            self.agent.critic_lr.to_string(),
            self.agent.safety_lr.to_string(),
            self.agent.tau.to_string(),
            self.agent.gamma.to_string(),
            self.agent.buffer_capacity.to_string(),
            self.agent.batch_size.to_string(),
            self.agent.noise_initial.to_string(),
            self.agent.noise_decay.to_string(),
            self.agent.noise_floor.to_string(),
            self.agent.actor_final_bound.to_string(),
            self.profiles.theta_min.to_string(),
            self.profiles.theta_max.to_string(),
            self.profiles.lambda_max.to_string(),
            self.profiles.lambda_min.to_string(),
            self.mac.lambda_meta.to_string(),
            self.mac.eps.to_string(),
            self.mac.train_freq.to_string(),
            self.mac.buffer_capacity.to_string(),
            self.mac.batch_size.to_string(),
            self.mac.lr.to_string(),
            self.mac.steps_per_update.to_string(),
            join(&self.mac_hidden),
            self.train.n_agents.to_string(),
            self.train.max_episodes.to_string(),
            self.train.seed.to_string(),
            self.train.variant.name(),
            self.train.output_dir.display().to_string(),
            self.train.keep_checkpoints.to_string(),
            self.train.save_resume.to_string(),
            self.backtest.risk_free_rate.to_string(),
            self.backtest.periods_per_year.to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Flat TOML document that loads back to the same config.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let bare = v.parse::<f64>().is_ok() || v == "true" || v == "false";
            if bare {
                out.push_str(&format!("{k} = {v}\n"));
            } else {
                out.push_str(&format!("{k} = {}\n", toml::Value::String(v)));
            }
        }
        out
    }

    /// SHA-256 over the canonical TOML form, excluding the output directory.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            if k == "train.output_dir" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(value), &mut flat)?;
        let mut cfg = Self::default();
        for (k, v) in flat {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.into()))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.env.validate().map_err(|e| inv(&e))?;
        self.risk.validate().map_err(|e| inv(&e))?;
        self.agent.validate().map_err(|e| inv(&e))?;
        self.mac.validate().map_err(|e| inv(&e))?;
        if self.n_agents() == 0 {
            return Err(ConfigError::Invalid("need at least one agent".into()));
        }
        let p = &self.profiles;
        if !(0.0..=1.0).contains(&p.theta_min) || !(0.0..=1.0).contains(&p.theta_max) {
            return Err(ConfigError::Invalid("profile thetas must lie in [0, 1]".into()));
        }
        if !(p.lambda_min > 0.0 && p.lambda_max > 0.0) {
            return Err(ConfigError::Invalid("profile lambdas must be positive".into()));
        }
        if self.mac_hidden.iter().any(|h| *h == 0) {
            return Err(ConfigError::Invalid("controller hidden widths must be positive".into()));
        }
        if self.data.path.is_none() && (self.synth.n_assets == 0 || self.synth.regimes.is_empty()) {
            return Err(ConfigError::Invalid("synthetic market needs assets and a regime".into()));
        }
        if !(self.backtest.periods_per_year > 0.0) {
            return Err(ConfigError::Invalid("periods per year must be positive".into()));
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) -> Result<(), ConfigError> {
    use toml::Value;
    let text = match v {
        Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out)?;
            }
            return Ok(());
        }
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        Value::Datetime(d) => d.to_string(),
        Value::Array(items) => {
            let mut parts = Vec::new();
            for item in items {
                match item {
                    Value::Table(_) | Value::Array(_) => {
                        return Err(ConfigError::InvalidValue {
                            key: prefix.into(),
                            value: v.to_string(),
                            reason: "nested arrays are not supported".into(),
                        })
                    }
                    Value::String(s) => parts.push(s.clone()),
                    other => parts.push(other.to_string()),
                }
            }
            parts.join(",")
        }
    };
    out.push((prefix.to_string(), text));
    Ok(())
}
