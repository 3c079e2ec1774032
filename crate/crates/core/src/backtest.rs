//! Greedy evaluation on a held-out span, performance metrics and report output.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentError;
use crate::config::{ExperimentConfig, Variant};
use crate::env::{state_dim, EnvConfig, EnvData, EnvError, PortfolioEnv};
use crate::meta::{aggregate, group_mass, mac_weights, uniform_weights, MetaError};
use crate::nn::NnError;
use crate::risk::{overlay_validate, RiskConfig, RiskError};
use crate::train::{SystemMeta, SYSTEM_FORMAT};
use crate::{Mlp, Real, Scalar};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("equity curve needs at least 2 points, got {0}")]
    CurveTooShort(usize),
    #[error("invalid equity curve: {0}")]
    InvalidCurve(String),
    #[error("checkpoint does not match the data: {0}")]
    ArchitectureMismatch(String),
    #[error("checkpoint not found: {0}")]
    CheckpointMissing(PathBuf),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Portfolio value by date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl EquityCurve {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self, BacktestError> {
        if dates.len() != values.len() {
            return Err(BacktestError::InvalidCurve(format!("{} dates for {} values", dates.len(), values.len())));
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] <= w[0]) {
            return Err(BacktestError::InvalidCurve(format!("dates not increasing at {}", w[1])));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(BacktestError::InvalidCurve(format!("non-positive value {v}")));
        }
        Ok(Self { dates, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `V_t / max_{τ≤t} V_τ − 1` at every point.
    pub fn drawdowns(&self) -> Vec<f64> {
        drawdown_series(&self.values)
    }
}

pub fn drawdown_series<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut peak = T::neg_infinity();
    values
        .iter()
        .map(|&v| {
            peak = peak.max(v);
            v / peak - T::one()
        })
        .collect()
}

/// Worst drawdown, as a non-positive fraction.
pub fn max_drawdown<T: Scalar>(values: &[T]) -> T {
    drawdown_series(values).into_iter().fold(T::zero(), T::min)
}

/// Curve statistics as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics<T> {
    pub cumulative_return: T,
    pub annualized_return: T,
    pub annualized_volatility: T,
    pub sharpe: T,
    pub max_drawdown: T,
    /// False when volatility is zero and the Sharpe ratio is reported as 0.
    pub sharpe_defined: bool,
    /// Number of periodic returns.
    pub periods: usize,
}

/// Sample standard deviation of the periodic returns; zero with one return.
fn sample_std<T: Scalar>(xs: &[T], mean: T) -> T {
    if xs.len() < 2 {
        return T::zero();
    }
    let ss = xs.iter().fold(T::zero(), |acc, &x| acc + (x - mean) * (x - mean));
    (ss / T::lit((xs.len() - 1) as f64)).sqrt()
}

pub fn metrics<T: Scalar>(values: &[T], periods_per_year: T, risk_free_rate: T) -> Result<Metrics<T>, BacktestError> {
    let n = values.len();
    if n < 2 {
        return Err(BacktestError::CurveTooShort(n));
    }
    let returns = crate::scalar::simple_returns(values);
    let periods = returns.len();
    let cr = values[n - 1] / values[0] - T::one();
    let ar = (T::one() + cr).powf(periods_per_year / T::lit(periods as f64)) - T::one();
    let mean = crate::scalar::mean(&returns);
    let avol = sample_std(&returns, mean) * periods_per_year.sqrt();
    let sharpe_defined = avol > T::zero();
    let sharpe = if sharpe_defined { (mean * periods_per_year - risk_free_rate) / avol } else { T::zero() };
    Ok(Metrics {
        cumulative_return: cr,
        annualized_return: ar,
        annualized_volatility: avol,
        sharpe,
        max_drawdown: max_drawdown(values),
        sharpe_defined,
        periods,
    })
}

/// What a policy decides in one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    /// Aggregated action before the overlay.
    pub action: Vec<Real>,
    /// Ensemble weights.
    pub weights: Vec<Real>,
}

pub trait Policy {
    fn propose(&mut self, s: &[Real], env: &PortfolioEnv) -> Result<Proposal, BacktestError>;
}

/// A closure used as a single-member policy with weight 1.
pub struct ScriptedPolicy<F>(pub F);

impl<F: FnMut(&[Real], &PortfolioEnv) -> Vec<Real>> Policy for ScriptedPolicy<F> {
    fn propose(&mut self, s: &[Real], env: &PortfolioEnv) -> Result<Proposal, BacktestError> {
        Ok(Proposal { action: (self.0)(s, env), weights: vec![1.0] })
    }
}

/// Trained ensemble acting greedily.
#[derive(Debug, Clone)]
pub struct EnsemblePolicy {
    pub meta: SystemMeta,
    pub actors: Vec<Mlp>,
    /// `None` means uniform weights.
    pub controller: Option<Mlp>,
}

fn mismatch(msg: String) -> BacktestError {
    BacktestError::ArchitectureMismatch(msg)
}

impl EnsemblePolicy {
    pub fn new(meta: SystemMeta, actors: Vec<Mlp>, mac: Mlp) -> Result<Self, BacktestError> {
        let d = meta.n_assets;
        let sd = state_dim(d);
        if meta.state_dim != sd {
            return Err(mismatch(format!("state dimension {} for {d} assets", meta.state_dim)));
        }
        if actors.len() != meta.n_agents || actors.is_empty() {
            return Err(mismatch(format!("{} actors for {} agents", actors.len(), meta.n_agents)));
        }
        for (i, a) in actors.iter().enumerate() {
            if a.input_dim() != sd || a.output_dim() != d {
                return Err(mismatch(format!("actor {i} maps {} -> {}", a.input_dim(), a.output_dim())));
            }
        }
        if mac.input_dim() != sd || mac.output_dim() != meta.n_agents {
            return Err(mismatch(format!("controller maps {} -> {}", mac.input_dim(), mac.output_dim())));
        }
        let uses_controller = Variant::parse(&meta.variant).map(|v| v.uses_controller()).unwrap_or(true);
        Ok(Self { meta, actors, controller: uses_controller.then_some(mac) })
    }

    /// Reads a checkpoint directory written during training.
    pub fn load(dir: &Path) -> Result<Self, BacktestError> {
        let sys = dir.join("system.json");
        if !sys.is_file() {
            return Err(BacktestError::CheckpointMissing(sys));
        }
        let meta: SystemMeta = serde_json::from_str(&std::fs::read_to_string(&sys)?)?;
        if meta.format != SYSTEM_FORMAT {
            return Err(mismatch(format!("unknown checkpoint format {:?}", meta.format)));
        }
        let load = |name: String| -> Result<Mlp, BacktestError> {
            let p = dir.join(&name);
            if !p.is_file() {
                return Err(BacktestError::CheckpointMissing(p));
            }
            Ok(Mlp::load(&p)?)
        };
        let actors = (0..meta.n_agents).map(|i| load(format!("agent_{i}_actor.json"))).collect::<Result<Vec<_>, _>>()?;
        let mac = load("mac.json".into())?;
        Self::new(meta, actors, mac)
    }

    pub fn check_data(&self, data: &EnvData) -> Result<(), BacktestError> {
        if data.n_assets() != self.meta.n_assets {
            return Err(mismatch(format!("checkpoint has {} assets, data has {}", self.meta.n_assets, data.n_assets())));
        }
        if data.symbols != self.meta.symbols {
            return Err(mismatch(format!("symbols {:?} differ from {:?}", data.symbols, self.meta.symbols)));
        }
        Ok(())
    }
}

impl Policy for EnsemblePolicy {
    fn propose(&mut self, s: &[Real], _env: &PortfolioEnv) -> Result<Proposal, BacktestError> {
        let actions = self.actors.iter().map(|a| a.predict(s)).collect::<Result<Vec<_>, _>>()?;
        let weights = match &self.controller {
            Some(mac) => mac_weights(mac, s)?,
            None => uniform_weights(self.actors.len()),
        };
        Ok(Proposal { action: aggregate(&actions, &weights)?, weights })
    }
}

/// Everything recorded during one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestRun {
    /// Starts with the initial cash on the first decision date.
    pub curve: EquityCurve,
    /// Policy weights on every curve date.
    pub weights: Vec<Vec<Real>>,
    /// Post-overlay actions, one per step.
    pub executed: Vec<Vec<Real>>,
    pub costs: Vec<f64>,
}

/// Runs `policy` greedily over `data` with the overlay in the loop.
pub fn run_backtest(
    policy: &mut dyn Policy,
    data: Arc<EnvData>,
    env_cfg: EnvConfig,
    risk: &RiskConfig,
) -> Result<BacktestRun, BacktestError> {
    let (mut env, mut s) = PortfolioEnv::reset(env_cfg, data)?;
    let mut dates = vec![env.date()];
    let mut values = vec![env.portfolio.value()];
    let mut weights = Vec::new();
    let mut executed = Vec::new();
    let mut costs = Vec::new();
    while !env.is_done() {
        let p = policy.propose(&s, &env)?;
        let a = overlay_validate(&p.action, &env.portfolio, &env.config, &risk.overlay)?;
        let out = env.step(&a)?;
        weights.push(p.weights);
        executed.push(a);
        costs.push(out.execution.cost);
        dates.push(out.date);
        values.push(out.execution.value_after);
        s = out.next_state;
    }
    weights.push(policy.propose(&s, &env)?.weights);
    Ok(BacktestRun { curve: EquityCurve::new(dates, values)?, weights, executed, costs })
}

pub const REPORT_FORMAT: &str = "mars-backtest-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityPoint {
    pub date: NaiveDate,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub date: NaiveDate,
    pub weights: Vec<f64>,
    /// Mass on the conservative, neutral and aggressive thirds.
    pub groups: [f64; 3],
}

/// Versioned evaluation report. Percent fields are in percent; losses and
/// drawdowns are negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub format: String,
    pub version: u32,
    pub variant: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub periods_per_year: f64,
    pub risk_free_rate: f64,
    pub cr_pct: f64,
    pub ar_pct: f64,
    pub sr: f64,
    pub avol_pct: f64,
    pub mdd_pct: f64,
    pub sharpe_defined: bool,
    pub steps: usize,
    pub total_cost: f64,
    pub equity: Vec<EquityPoint>,
    pub weights: Vec<WeightRow>,
}

impl BacktestReport {
    pub fn build(run: &BacktestRun, cfg: &ExperimentConfig) -> Result<Self, BacktestError> {
        let b = &cfg.backtest;
        let m = metrics(&run.curve.values, b.periods_per_year, b.risk_free_rate)?;
        let c = &run.curve;
        Ok(Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            variant: cfg.train.variant.name(),
            seed: cfg.train.seed,
            config_fingerprint: cfg.fingerprint(),
            start_date: c.dates[0],
            end_date: c.dates[c.len() - 1],
            periods_per_year: b.periods_per_year,
            risk_free_rate: b.risk_free_rate,
            cr_pct: 100.0 * m.cumulative_return,
            ar_pct: 100.0 * m.annualized_return,
            sr: m.sharpe,
            avol_pct: 100.0 * m.annualized_volatility,
            mdd_pct: 100.0 * m.max_drawdown,
            sharpe_defined: m.sharpe_defined,
            steps: m.periods,
            total_cost: run.costs.iter().sum(),
            equity: c.dates.iter().zip(&c.values).map(|(&date, &value)| EquityPoint { date, value }).collect(),
            weights: c
                .dates
                .iter()
                .zip(&run.weights)
                .map(|(&date, w)| WeightRow { date, weights: w.clone(), groups: group_mass(w) })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    PlotData,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "json" => Some(Self::Json),
            "csv" => Some(Self::Csv),
            "plot-data" => Some(Self::PlotData),
            _ => None,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Json => "report.json",
            Self::Csv => "metrics.csv",
            Self::PlotData => "plot_data.csv",
        }
    }
}

pub const PLOT_SERIES: [&str; 5] = ["equity", "drawdown", "w_conservative", "w_neutral", "w_aggressive"];

pub fn write_report<W: Write>(report: &BacktestReport, format: ReportFormat, out: &mut W) -> Result<(), BacktestError> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut *out, report)?;
            writeln!(out)?;
        }
        ReportFormat::Csv => {
            writeln!(out, "metric,value")?;
            for (k, v) in [
                ("cr_pct", report.cr_pct),
                ("ar_pct", report.ar_pct),
                ("sr", report.sr),
                ("avol_pct", report.avol_pct),
                ("mdd_pct", report.mdd_pct),
            ] {
                writeln!(out, "{k},{v}")?;
            }
            writeln!(out, "sharpe_defined,{}", report.sharpe_defined)?;
        }
        ReportFormat::PlotData => {
            writeln!(out, "date,series,value")?;
            let values: Vec<f64> = report.equity.iter().map(|p| p.value).collect();
            let dd = drawdown_series(&values);
            for (i, p) in report.equity.iter().enumerate() {
                let g = report.weights.get(i).map(|w| w.groups).unwrap_or([f64::NAN; 3]);
                let row = [p.value, dd[i], g[0], g[1], g[2]];
                for (name, v) in PLOT_SERIES.iter().zip(row) {
                    writeln!(out, "{},{name},{v}", p.date)?;
                }
            }
        }
    }
    Ok(())
}

/// Writes the report into `dir` in the given format and returns the path.
pub fn emit_report(report: &BacktestReport, format: ReportFormat, dir: &Path) -> Result<PathBuf, BacktestError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format.file_name());
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_report(report, format, &mut w)?;
    w.flush()?;
    Ok(path)
}
