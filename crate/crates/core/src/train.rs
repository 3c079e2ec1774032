//! Training loop: per step every agent proposes, the controller weights the
//! proposals, the overlay validates the aggregate and the environment executes
//! it; transitions go to every agent buffer and one record to the controller
//! buffer, then every agent runs one update. The controller trains on episode
//! boundaries.
//!
//! Output directory layout:
//! - `config.toml`: the resolved configuration
//! - `checkpoints/{initial,episode_NNN,final}/`: `system.json`, `mac.json` and
//!   `agent_{i}_{actor,critic,safety}.json`
//! - `traces/episodes.csv`, `traces/steps_episode_NNN.csv`,
//!   `traces/weights_episode_NNN.csv`, `traces/losses_episode_NNN.csv`
//! - `resume.json`: full run state after the last finished episode

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{profile_grid, Agent, AgentError, AgentLosses, AgentNets, ReplayBuffer, RiskProfile, Transition};
use crate::config::{ConfigError, ExperimentConfig, Variant};
use crate::data::{
    compute_indicators, fit_normalizer, load_ohlcv_with, split, write_ohlcv, DataError, DateSpan, IndicatorParams,
    MarketTable, NormStats, OhlcvRow, OhlcvTable,
};
use crate::env::{write_step_row, EnvData, EnvError, PortfolioEnv, PortfolioState, StepOutcome, STEP_TRACE_HEADER};
use crate::manifest::{sha256_bytes, sha256_file};
use crate::meta::{aggregate, uniform_weights, weight_trace_header, write_weight_row, Controller, MacRecord, MetaError};
use crate::nn::NnError;
use crate::risk::{env_risk, overlay_validate, RiskConfig, RiskError};
use crate::rng::{SeedStreams, Stream};
use crate::{Mlp, MlpOptState, Real};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
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
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("non-finite value in episode {episode}, step {step}: {detail}")]
    NonFinite { episode: usize, step: usize, detail: String, dump: Option<PathBuf> },
    #[error("cannot resume: {0}")]
    Resume(String),
}

impl TrainError {
    pub fn is_non_finite(&self) -> bool {
        matches!(self, TrainError::NonFinite { .. })
    }
}

/// Loaded market data cut into the three spans, with features normalized on
/// the training span.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub fingerprint: String,
    pub table: MarketTable,
    pub spans: [DateSpan; 3],
    pub norm: NormStats,
    pub train: Arc<EnvData>,
    pub validation: Arc<EnvData>,
    pub test: Arc<EnvData>,
}

fn rows_of(table: &OhlcvTable) -> Vec<OhlcvRow> {
    let mut rows = Vec::with_capacity(table.n_rows());
    for (t, date) in table.dates.iter().enumerate() {
        for (i, sym) in table.symbols.iter().enumerate() {
            let b = table.bars[i][t];
            rows.push(OhlcvRow { date: *date, symbol: sym.clone(), open: b.open, high: b.high, low: b.low, close: b.close, volume: b.volume });
        }
    }
    rows
}

/// SHA-256 of the canonical CSV rendering of a table.
pub fn table_fingerprint(table: &OhlcvTable) -> String {
    let mut buf = Vec::new();
    write_ohlcv(&mut buf, &rows_of(table)).expect("writing to memory");
    sha256_bytes(&buf)
}

/// 70 / 15 / 15 split of the available dates.
pub fn default_spans(dates: &[NaiveDate]) -> Result<[DateSpan; 3], DataError> {
    let n = dates.len();
    if n < 3 {
        return Err(DataError::InsufficientHistory { required: 3, available: n });
    }
    let a = ((n as f64 * 0.70) as usize).clamp(1, n - 2);
    let b = ((n as f64 * 0.85) as usize).clamp(a + 1, n - 1);
    Ok([
        DateSpan::new(dates[0], dates[a - 1]),
        DateSpan::new(dates[a], dates[b - 1]),
        DateSpan::new(dates[b], dates[n - 1]),
    ])
}

impl Dataset {
    /// Loads the configured CSV or generates the synthetic market.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self, TrainError> {
        let (ohlcv, fingerprint) = match &cfg.data.path {
            Some(p) => (load_ohlcv_with(p, cfg.data.coverage)?, sha256_file(p)?),
            None => {
                let t = cfg.synth.generate()?;
                let fp = table_fingerprint(&t);
                (t, fp)
            }
        };
        Self::from_ohlcv(&ohlcv, cfg, fingerprint)
    }

    pub fn from_ohlcv(ohlcv: &OhlcvTable, cfg: &ExperimentConfig, fingerprint: String) -> Result<Self, TrainError> {
        let table = compute_indicators(ohlcv, &IndicatorParams::default())?;
        let defaults = default_spans(&table.dates)?;
        let d = &cfg.data;
        let spans = [
            d.train_span.unwrap_or(defaults[0]),
            d.validation_span.unwrap_or(defaults[1]),
            d.test_span.unwrap_or(defaults[2]),
        ];
        let splits = split(&table, spans)?;
        let norm = fit_normalizer(&splits.train)?;
        let w = cfg.env.window;
        let env_data = |span: &DateSpan| -> Result<Arc<EnvData>, TrainError> {
            Ok(Arc::new(EnvData::new(&table.with_history(span, w)?, &norm)))
        };
        Ok(Self {
            fingerprint,
            train: env_data(&spans[0])?,
            validation: env_data(&spans[1])?,
            test: env_data(&spans[2])?,
            spans,
            norm,
            table,
        })
    }
}

/// Everything decided in one step, kept for buffers, traces and checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub proposals: Vec<Vec<Real>>,
    pub weights: Vec<Real>,
    pub aggregated: Vec<Real>,
    pub executed: Vec<Real>,
    /// `Q_i(s, a_i)` from each agent's critic.
    pub q: Vec<Real>,
    /// `C_i(s, a_i)` from each agent's safety-critic.
    pub c: Vec<Real>,
    /// Environmental risk of each proposal.
    pub risk_labels: Vec<Real>,
}

/// Act, weight, aggregate and validate. `controller = None` gives uniform weights.
pub fn decision_step(
    agents: &mut [Agent],
    controller: Option<&Mlp>,
    env: &PortfolioEnv,
    s: &[Real],
    noise: f64,
    risk: &RiskConfig,
) -> Result<Decision, TrainError> {
    let n = agents.len();
    let mut proposals = Vec::with_capacity(n);
    for a in agents.iter_mut() {
        proposals.push(a.act(s, noise)?);
    }
    let weights = match controller {
        Some(net) => crate::meta::mac_weights(net, s)?,
        None => uniform_weights(n),
    };
    let aggregated = aggregate(&proposals, &weights)?;
    let executed = overlay_validate(&aggregated, &env.portfolio, &env.config, &risk.overlay)?;
    let returns = env.return_window();
    let mut q = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut risk_labels = Vec::with_capacity(n);
    for (agent, a) in agents.iter().zip(&proposals) {
        let (qi, ci) = agent.nets.evaluate(s, a)?;
        q.push(qi);
        c.push(ci);
        risk_labels.push(env_risk(&env.portfolio, &returns, a, &env.config, risk)?.total);
    }
    Ok(Decision { proposals, weights, aggregated, executed, q, c, risk_labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub noise: f64,
    /// Sum of rewards.
    pub episode_return: f64,
    pub final_value: f64,
    pub steps: usize,
    /// Agent updates performed, summed over agents.
    pub updates: usize,
    /// Agent update slots skipped during buffer warm-up.
    pub skipped_updates: usize,
    /// Mean controller loss of the round that closed the episode.
    pub mac_loss: Option<f64>,
}

/// Borrowed view of one step for observers.
pub struct StepEvent<'a> {
    pub episode: usize,
    pub step: usize,
    pub date: NaiveDate,
    pub noise: f64,
    pub before: &'a PortfolioState,
    pub after: &'a PortfolioState,
    pub decision: &'a Decision,
    pub outcome: &'a StepOutcome,
    pub losses: &'a [Option<AgentLosses>],
    pub config: &'a ExperimentConfig,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _event: &StepEvent<'_>) {}
    fn on_episode(&mut self, _summary: &EpisodeSummary) {}
}

impl TrainObserver for () {}

/// Complete mutable state of a run between episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Episodes completed.
    pub episode: usize,
    pub agents: Vec<Agent>,
    pub controller: Controller,
    pub history: Vec<EpisodeSummary>,
}

/// Profiles and stream indices for the configured variant.
pub fn ensemble_layout(cfg: &ExperimentConfig) -> Vec<(RiskProfile, usize)> {
    let n = cfg.n_agents();
    let p = &cfg.profiles;
    match cfg.train.variant {
        Variant::Homogeneous => {
            let shared = profile_grid(1, (p.theta_min, p.theta_max), (p.lambda_max, p.lambda_min)).remove(0);
            (0..n).map(|_| (shared.clone(), 0)).collect()
        }
        _ => profile_grid(n, (p.theta_min, p.theta_max), (p.lambda_max, p.lambda_min)).into_iter().zip(0..n).collect(),
    }
}

impl RunState {
    pub fn new(cfg: &ExperimentConfig, state_dim: usize, n_assets: usize) -> Self {
        let streams = SeedStreams::new(cfg.train.seed);
        let agents = ensemble_layout(cfg)
            .into_iter()
            .enumerate()
            .map(|(i, (profile, seed_index))| Agent::new(i, seed_index, profile, state_dim, n_assets, &cfg.agent, &streams))
            .collect();
        let controller = Controller::new(state_dim, cfg.n_agents(), &cfg.mac_hidden, &cfg.mac, &streams);
        Self { episode: 0, agents, controller, history: Vec::new() }
    }
}

/// Drives episodes over the training span and writes artifacts.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub data: Arc<EnvData>,
    pub state: RunState,
    pub norm: Option<NormStats>,
    /// Artifacts are written here when set.
    pub out_dir: Option<PathBuf>,
}

struct Writers {
    steps: BufWriter<File>,
    weights: BufWriter<File>,
    losses: BufWriter<File>,
}

fn finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

impl Trainer {
    pub fn new(config: ExperimentConfig, data: Arc<EnvData>) -> Result<Self, TrainError> {
        config.validate()?;
        let d = data.n_assets();
        let state = RunState::new(&config, crate::env::state_dim(d), d);
        Ok(Self { config, data, state, norm: None, out_dir: None })
    }

    pub fn with_output(mut self, dir: impl Into<PathBuf>, norm: NormStats) -> Self {
        self.out_dir = Some(dir.into());
        self.norm = Some(norm);
        self
    }

    fn controller_net(&self) -> Option<&Mlp> {
        self.config.train.variant.uses_controller().then_some(&self.state.controller.net)
    }

    fn open_writers(&self, episode: usize) -> Result<Option<Writers>, TrainError> {
        let Some(dir) = &self.out_dir else { return Ok(None) };
        let traces = dir.join("traces");
        std::fs::create_dir_all(&traces)?;
        let open = |name: String, header: String| -> Result<BufWriter<File>, TrainError> {
            let mut w = BufWriter::new(File::create(traces.join(name))?);
            writeln!(w, "{header}")?;
            Ok(w)
        };
        Ok(Some(Writers {
            steps: open(format!("steps_episode_{episode:03}.csv"), STEP_TRACE_HEADER.into())?,
            weights: open(format!("weights_episode_{episode:03}.csv"), weight_trace_header(self.state.agents.len()))?,
            losses: open(format!("losses_episode_{episode:03}.csv"), "step,agent,critic,safety,actor_objective".into())?,
        }))
    }

    fn abort(&self, episode: usize, step: usize, detail: String, diag: serde_json::Value) -> TrainError {
        let dump = self.out_dir.as_ref().and_then(|dir| {
            let path = dir.join("abort_dump.json");
            let body = serde_json::json!({ "episode": episode, "step": step, "detail": detail, "diagnostics": diag });
            std::fs::create_dir_all(dir).ok()?;
            std::fs::write(&path, serde_json::to_string_pretty(&body).ok()?).ok()?;
            Some(path)
        });
        TrainError::NonFinite { episode, step, detail, dump }
    }

    /// Runs one episode over the full training span.
    pub fn run_episode(&mut self, observer: &mut dyn TrainObserver) -> Result<EpisodeSummary, TrainError> {
        let episode = self.state.episode;
        let noise = self.config.agent.noise_at(episode);
        let (mut env, s0) = PortfolioEnv::reset(self.config.env, self.data.clone())?;
        let mut s = Arc::new(s0);
        let mut writers = self.open_writers(episode)?;
        let n = self.state.agents.len();
        let mut summary = EpisodeSummary {
            episode,
            noise,
            episode_return: 0.0,
            final_value: env.portfolio.value(),
            steps: 0,
            updates: 0,
            skipped_updates: 0,
            mac_loss: None,
        };
        let record_mac = self.config.train.variant.uses_controller();
        let mut step = 0;
        while !env.is_done() {
            let before = env.portfolio.clone();
            let date = env.date();
            let mac = self.controller_net().cloned();
            let decision = decision_step(&mut self.state.agents, mac.as_ref(), &env, &s, noise, &self.config.risk)?;
            if !finite(&decision.weights) || !finite(&decision.q) || !finite(&decision.c) {
                let diag = serde_json::to_value(&decision).unwrap_or_default();
                return Err(self.abort(episode, step, "decision".into(), diag));
            }
            let outcome = env.step(&decision.executed)?;
            let e = &outcome.execution;
            if !e.reward.is_finite() || !e.value_after.is_finite() || !finite(&outcome.next_state) {
                let diag = serde_json::to_value(&outcome).unwrap_or_default();
                return Err(self.abort(episode, step, "environment".into(), diag));
            }
            let next = Arc::new(outcome.next_state.clone());
            for (i, agent) in self.state.agents.iter_mut().enumerate() {
                agent.buffer.push(Transition {
                    state: s.clone(),
                    action: decision.executed.clone(),
                    reward: e.reward,
                    next_state: next.clone(),
                    done: outcome.done,
                    proposed: decision.proposals[i].clone(),
                    risk_label: decision.risk_labels[i],
                });
            }
            if record_mac {
                self.state.controller.buffer.push(MacRecord { state: s.clone(), q: decision.q.clone(), c: decision.c.clone() });
            }

            let agent_cfg = &self.config.agent;
            let results: Vec<Result<Option<AgentLosses>, AgentError>> =
                self.state.agents.par_iter_mut().map(|a| a.learn(agent_cfg)).collect();
            let mut losses = Vec::with_capacity(n);
            for (i, r) in results.into_iter().enumerate() {
                match r {
                    Ok(l) => losses.push(l),
                    Err(AgentError::Nn(NnError::NonFiniteGradient)) => {
                        return Err(self.abort(episode, step, format!("agent {i} gradient"), serde_json::Value::Null));
                    }
                    Err(err) => return Err(err.into()),
                }
            }
            for (i, l) in losses.iter().enumerate() {
                if let Some(l) = l {
                    if !(l.critic.is_finite() && l.safety.is_finite() && l.actor_objective.is_finite()) {
                        let diag = serde_json::to_value(l).unwrap_or_default();
                        return Err(self.abort(episode, step, format!("agent {i} loss"), diag));
                    }
                    summary.updates += 1;
                } else {
                    summary.skipped_updates += 1;
                }
            }

            if let Some(w) = writers.as_mut() {
                write_step_row(&mut w.steps, step, &outcome)?;
                write_weight_row(&mut w.weights, date, &decision.weights)?;
                for (i, l) in losses.iter().enumerate() {
                    if let Some(l) = l {
                        writeln!(w.losses, "{step},{i},{},{},{}", l.critic, l.safety, l.actor_objective)?;
                    }
                }
            }
            observer.on_step(&StepEvent {
                episode,
                step,
                date,
                noise,
                before: &before,
                after: &env.portfolio,
                decision: &decision,
                outcome: &outcome,
                losses: &losses,
                config: &self.config,
            });
            summary.episode_return += e.reward;
            summary.final_value = e.value_after;
            summary.steps += 1;
            s = next;
            step += 1;
        }
        if let Some(mut w) = writers {
            w.steps.flush()?;
            w.weights.flush()?;
            w.losses.flush()?;
        }

        if record_mac && (episode + 1) % self.config.mac.train_freq == 0 {
            let losses = self.state.controller.train_round(&self.config.mac).map_err(|e| match e {
                MetaError::Nn(NnError::NonFiniteGradient) => self.abort(episode, step, "controller gradient".into(), serde_json::Value::Null),
                other => other.into(),
            })?;
            if !losses.is_empty() {
                let mean = losses.iter().sum::<f64>() / losses.len() as f64;
                if !mean.is_finite() {
                    return Err(self.abort(episode, step, "controller loss".into(), serde_json::json!(losses)));
                }
                summary.mac_loss = Some(mean);
            }
        }
        self.state.episode += 1;
        self.state.history.push(summary.clone());
        observer.on_episode(&summary);
        Ok(summary)
    }

    /// Runs the remaining episodes, writing checkpoints, traces and the resume
    /// state when an output directory is set.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<(), TrainError> {
        if let Some(dir) = self.out_dir.clone() {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("config.toml"), self.config.to_toml())?;
            if self.state.episode == 0 {
                self.write_checkpoint(&dir.join("checkpoints/initial"))?;
            }
            self.write_episode_table(&dir)?;
        }
        while self.state.episode < self.config.train.max_episodes {
            self.run_episode(observer)?;
            if let Some(dir) = self.out_dir.clone() {
                let k = self.state.episode;
                self.write_checkpoint(&dir.join(format!("checkpoints/episode_{k:03}")))?;
                let keep = self.config.train.keep_checkpoints;
                if k > keep {
                    let old = dir.join(format!("checkpoints/episode_{:03}", k - keep));
                    if old.exists() {
                        std::fs::remove_dir_all(old)?;
                    }
                }
                self.write_episode_table(&dir)?;
                if self.config.train.save_resume {
                    self.save_resume(&dir.join("resume.json"))?;
                }
            }
        }
        if let Some(dir) = self.out_dir.clone() {
            if self.state.episode > 0 {
                self.write_checkpoint(&dir.join("checkpoints/final"))?;
            }
        }
        Ok(())
    }

    fn write_episode_table(&self, dir: &Path) -> Result<(), TrainError> {
        let traces = dir.join("traces");
        std::fs::create_dir_all(&traces)?;
        let mut w = BufWriter::new(File::create(traces.join("episodes.csv"))?);
        writeln!(w, "episode,noise,episode_return,final_value,steps,updates,skipped_updates,mac_loss")?;
        for h in &self.state.history {
            let mac = h.mac_loss.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                h.episode, h.noise, h.episode_return, h.final_value, h.steps, h.updates, h.skipped_updates, mac
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn system_meta(&self) -> SystemMeta {
        SystemMeta {
            format: SYSTEM_FORMAT.into(),
            version: 1,
            variant: self.config.train.variant.name(),
            seed: self.config.train.seed,
            config_fingerprint: self.config.fingerprint(),
            episode: self.state.episode,
            n_agents: self.state.agents.len(),
            n_assets: self.data.n_assets(),
            state_dim: crate::env::state_dim(self.data.n_assets()),
            symbols: self.data.symbols.clone(),
            profiles: self.state.agents.iter().map(|a| a.profile.clone()).collect(),
            norm: self.norm,
        }
    }

    pub fn write_checkpoint(&self, dir: &Path) -> Result<(), TrainError> {
        write_system(dir, &self.system_meta(), &self.state.agents.iter().map(|a| &a.nets).collect::<Vec<_>>(), &self.state.controller.net)
    }

    pub fn save_resume(&self, path: &Path) -> Result<(), TrainError> {
        let snap = Snapshot::capture(&self.state, &resume_key(&self.config));
        let tmp = path.with_extension("json.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, &snap)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Restores the run state written by [`Trainer::save_resume`].
    pub fn load_resume(&mut self, path: &Path) -> Result<(), TrainError> {
        let snap: Snapshot = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        if snap.config_fingerprint != resume_key(&self.config) {
            return Err(TrainError::Resume("resume state was written with a different configuration".into()));
        }
        self.state = snap.restore()?;
        Ok(())
    }
}

/// Config fingerprint without the episode budget, so a finished run can be
/// extended.
fn resume_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.train.max_episodes = 0;
    c.fingerprint()
}

pub const SYSTEM_FORMAT: &str = "mars-system";

/// Metadata stored next to the network files of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMeta {
    pub format: String,
    pub version: u32,
    pub variant: String,
    pub seed: u64,
    pub config_fingerprint: String,
    /// Episodes completed when written.
    pub episode: usize,
    pub n_agents: usize,
    pub n_assets: usize,
    pub state_dim: usize,
    pub symbols: Vec<String>,
    pub profiles: Vec<RiskProfile>,
    pub norm: Option<NormStats>,
}

pub fn write_system(dir: &Path, meta: &SystemMeta, nets: &[&AgentNets], mac: &Mlp) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("system.json"), serde_json::to_string_pretty(meta)?)?;
    for (i, n) in nets.iter().enumerate() {
        n.actor.save(&dir.join(format!("agent_{i}_actor.json")))?;
        n.critic.save(&dir.join(format!("agent_{i}_critic.json")))?;
        n.safety.save(&dir.join(format!("agent_{i}_safety.json")))?;
    }
    mac.save(&dir.join("mac.json"))?;
    Ok(())
}

// Resume snapshots store every state vector once; buffers refer to it by index.

#[derive(Serialize, Deserialize)]
struct TransitionRef {
    state: usize,
    action: Vec<Real>,
    reward: Real,
    next_state: usize,
    done: bool,
    proposed: Vec<Real>,
    risk_label: Real,
}

#[derive(Serialize, Deserialize)]
struct MacRecordRef {
    state: usize,
    q: Vec<Real>,
    c: Vec<Real>,
}

#[derive(Serialize, Deserialize)]
struct AgentSnap {
    index: usize,
    profile: RiskProfile,
    nets: AgentNets,
    buffer: ReplayBuffer<TransitionRef>,
    noise_rng: Stream,
    buffer_rng: Stream,
}

#[derive(Serialize, Deserialize)]
struct ControllerSnap {
    net: Mlp,
    opt: MlpOptState,
    buffer: ReplayBuffer<MacRecordRef>,
    rng: Stream,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    config_fingerprint: String,
    episode: usize,
    history: Vec<EpisodeSummary>,
    states: Vec<Vec<Real>>,
    agents: Vec<AgentSnap>,
    controller: ControllerSnap,
}

#[derive(Default)]
struct Pool {
    index: HashMap<usize, usize>,
    states: Vec<Vec<Real>>,
}

impl Pool {
    fn intern(&mut self, s: &Arc<Vec<Real>>) -> usize {
        let key = Arc::as_ptr(s) as usize;
        *self.index.entry(key).or_insert_with(|| {
            self.states.push(s.as_ref().clone());
            self.states.len() - 1
        })
    }
}

impl Snapshot {
    fn capture(state: &RunState, fingerprint: &str) -> Self {
        let mut pool = Pool::default();
        let agents = state
            .agents
            .iter()
            .map(|a| AgentSnap {
                index: a.index,
                profile: a.profile.clone(),
                nets: a.nets.clone(),
                buffer: a.buffer.map(|t| TransitionRef {
                    state: pool.intern(&t.state),
                    action: t.action.clone(),
                    reward: t.reward,
                    next_state: pool.intern(&t.next_state),
                    done: t.done,
                    proposed: t.proposed.clone(),
                    risk_label: t.risk_label,
                }),
                noise_rng: a.noise_rng.clone(),
                buffer_rng: a.buffer_rng.clone(),
            })
            .collect();
        let c = &state.controller;
        let controller = ControllerSnap {
            net: c.net.clone(),
            opt: c.opt.clone(),
            buffer: c.buffer.map(|r| MacRecordRef { state: pool.intern(&r.state), q: r.q.clone(), c: r.c.clone() }),
            rng: c.rng.clone(),
        };
        Self {
            format: "mars-resume".into(),
            version: 1,
            config_fingerprint: fingerprint.into(),
            episode: state.episode,
            history: state.history.clone(),
            states: pool.states,
            agents,
            controller,
        }
    }

    fn restore(self) -> Result<RunState, TrainError> {
        let states: Vec<Arc<Vec<Real>>> = self.states.into_iter().map(Arc::new).collect();
        let get = |i: usize| states.get(i).cloned().ok_or_else(|| TrainError::Resume(format!("state index {i} out of range")));
        let mut agents = Vec::with_capacity(self.agents.len());
        for a in self.agents {
            for t in a.buffer.slots() {
                get(t.state)?;
                get(t.next_state)?;
            }
            let buffer = a.buffer.map(|t| Transition {
                state: states[t.state].clone(),
                action: t.action.clone(),
                reward: t.reward,
                next_state: states[t.next_state].clone(),
                done: t.done,
                proposed: t.proposed.clone(),
                risk_label: t.risk_label,
            });
            agents.push(Agent { index: a.index, profile: a.profile, nets: a.nets, buffer, noise_rng: a.noise_rng, buffer_rng: a.buffer_rng });
        }
        let c = self.controller;
        for r in c.buffer.slots() {
            get(r.state)?;
        }
        let buffer = c.buffer.map(|r| MacRecord { state: states[r.state].clone(), q: r.q.clone(), c: r.c.clone() });
        Ok(RunState {
            episode: self.episode,
            agents,
            controller: Controller { net: c.net, opt: c.opt, buffer, rng: c.rng },
            history: self.history,
        })
    }
}

/// Prepares data, trains and writes every artifact under `train.output_dir`.
pub fn train(cfg: &ExperimentConfig, observer: &mut dyn TrainObserver) -> Result<(Trainer, Dataset), TrainError> {
    cfg.validate()?;
    let dataset = Dataset::prepare(cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), dataset.train.clone())?.with_output(&cfg.train.output_dir, dataset.norm);
    trainer.run(observer)?;
    Ok((trainer, dataset))
}

/// Continues a run from `output_dir/resume.json`.
pub fn resume(cfg: &ExperimentConfig, observer: &mut dyn TrainObserver) -> Result<(Trainer, Dataset), TrainError> {
    cfg.validate()?;
    let dataset = Dataset::prepare(cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), dataset.train.clone())?.with_output(&cfg.train.output_dir, dataset.norm);
    trainer.load_resume(&cfg.train.output_dir.join("resume.json"))?;
    trainer.run(observer)?;
    Ok((trainer, dataset))
}
