use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mars_core::backtest::{emit_report, run_backtest, BacktestReport, EnsemblePolicy, ReportFormat};
use mars_core::config::{ExperimentConfig, Variant};
use mars_core::data::{load_ohlcv_with, write_ohlcv, FEATURE_NAMES};
use mars_core::env::EnvData;
use mars_core::manifest::{sha256_file, Manifest};
use mars_core::train::{self, Dataset, EpisodeSummary, TrainError, TrainObserver};

/// Config file looked up in the default config directory.
const DEFAULT_CONFIG_FILE: &str = "mars.toml";

#[derive(Parser)]
#[command(name = "mars", version, about = "Risk-profiled DDPG ensemble for portfolio management")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file (TOML). Defaults to mars.toml in the config directory, if present.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Directory holding the default mars.toml.
    #[arg(long, env = "MARS_CONFIG_DIR")]
    config_dir: Option<PathBuf>,
    /// Override one config key, e.g. `--set env.cost_rate=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an OHLCV CSV and write the indicator table and normalization.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// OHLCV CSV with columns date,symbol,open,high,low,close,volume.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_name = "START..END")]
        train_span: Option<String>,
        #[arg(long, value_name = "START..END")]
        validation_span: Option<String>,
        #[arg(long, value_name = "START..END")]
        test_span: Option<String>,
        /// Output directory for the bundle.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic regime-switching market as OHLCV CSV.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; the CSV is written as ohlcv.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the ensemble or an ablation variant.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// full, static, homogeneous, divK or custom-N.
        #[arg(long)]
        variant: Option<String>,
        /// Run directory (train.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's resume state.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained checkpoint greedily on a held-out span.
    Backtest {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint directory name under <run>/checkpoints.
        #[arg(long, default_value = "final")]
        checkpoint: String,
        /// train, validation or test.
        #[arg(long, default_value = "test")]
        span: String,
        /// Output directory; defaults to <run>/backtest_<span>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override keys of the run's config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Re-emit a backtest report in another format.
    Report {
        /// report.json written by `backtest`.
        #[arg(long)]
        input: PathBuf,
        /// json, csv or plot-data. Repeatable.
        #[arg(long, default_value = "csv")]
        format: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient, oracle and invariant checks.
    Selftest {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let path = match (&args.config, &args.config_dir) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(dir)) => Some(dir.join(DEFAULT_CONFIG_FILE)).filter(|p| p.is_file()),
        (None, None) => None,
    };
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(&p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

struct Progress;

impl TrainObserver for Progress {
    fn on_episode(&mut self, s: &EpisodeSummary) {
        let mac = s.mac_loss.map(|l| format!(" mac_loss {l:.4}")).unwrap_or_default();
        eprintln!(
            "episode {:>3}  noise {:.4}  return {:+.5}  value {:.2}  updates {}{mac}",
            s.episode, s.noise, s.episode_return, s.final_value, s.updates
        );
    }
}

fn ingest(
    args: &ConfigArgs,
    data: Option<PathBuf>,
    spans: [(&str, Option<String>); 3],
    out: &Path,
) -> Result<()> {
    let mut cfg = resolve_config(args)?;
    let mut overrides = args.overrides.clone();
    if let Some(d) = data {
        overrides.push(format!("data.path={}", d.display()));
        cfg.set("data.path", &d.to_string_lossy())?;
    }
    for (key, value) in spans {
        if let Some(v) = value {
            cfg.set(key, &v)?;
            overrides.push(format!("{key}={v}"));
        }
    }
    let path = cfg.data.path.clone().context("ingest needs --data or data.path")?;
    let raw = load_ohlcv_with(&path, cfg.data.coverage)?;
    let fingerprint = sha256_file(&path)?;
    let ds = Dataset::from_ohlcv(&raw, &cfg, fingerprint.clone())?;

    std::fs::create_dir_all(out)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("features.csv"))?);
    writeln!(w, "date,symbol,{}", FEATURE_NAMES.join(","))?;
    for (t, date) in ds.table.dates.iter().enumerate() {
        for (i, sym) in ds.table.symbols.iter().enumerate() {
            let r = &ds.table.rows[t][i];
            writeln!(w, "{date},{sym},{},{},{},{},{}", r.close, r.macd, r.rsi, r.cci, r.adx)?;
        }
    }
    w.flush()?;
    std::fs::write(out.join("norm.json"), serde_json::to_string_pretty(&ds.norm)?)?;
    let span_info = |name: &str, k: usize, d: &EnvData| {
        serde_json::json!({ "name": name, "span": ds.spans[k].to_string(), "dates_with_history": d.len() })
    };
    let bundle = serde_json::json!({
        "source": path.display().to_string(),
        "data_fingerprint": fingerprint,
        "symbols": raw.symbols,
        "raw_rows": raw.n_rows(),
        "raw_dates": raw.dates.len(),
        "feature_dates": ds.table.dates.len(),
        "feature_rows": ds.table.dates.len() * ds.table.symbols.len(),
        "spans": [span_info("train", 0, &ds.train), span_info("validation", 1, &ds.validation), span_info("test", 2, &ds.test)],
    });
    std::fs::write(out.join("bundle.json"), serde_json::to_string_pretty(&bundle)?)?;
    Manifest::new(&command_line(), &cfg, &overrides, &fingerprint).write(out)?;
    println!("{} rows, {} assets, {} indicator dates -> {}", raw.n_rows(), raw.n_assets(), ds.table.dates.len(), out.display());
    Ok(())
}

fn synth(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve_config(args)?;
    cfg.validate()?;
    let rows = cfg.synth.generate_rows();
    std::fs::create_dir_all(out)?;
    let path = out.join("ohlcv.csv");
    write_ohlcv(std::fs::File::create(&path)?, &rows)?;
    let fingerprint = sha256_file(&path)?;
    Manifest::new(&command_line(), &cfg, &args.overrides, &fingerprint).write(out)?;
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(())
}

fn train_cmd(args: &ConfigArgs, variant: Option<String>, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let mut cfg = resolve_config(args)?;
    let mut overrides = args.overrides.clone();
    if let Some(v) = variant {
        cfg.train.variant = Variant::parse(&v).map_err(anyhow::Error::msg)?;
        overrides.push(format!("train.variant={v}"));
    }
    if let Some(o) = out {
        overrides.push(format!("train.output_dir={}", o.display()));
        cfg.train.output_dir = o;
    }
    cfg.validate()?;
    let dir = cfg.train.output_dir.clone();
    if resume && !dir.join("resume.json").is_file() {
        bail!("no resume state in {}", dir.display());
    }
    let (trainer, dataset) =
        if resume { train::resume(&cfg, &mut Progress)? } else { train::train(&cfg, &mut Progress)? };
    Manifest::new(&command_line(), &cfg, &overrides, &dataset.fingerprint).write(&dir)?;
    println!("trained {} episodes ({}) -> {}", trainer.state.episode, cfg.train.variant.name(), dir.display());
    Ok(())
}

fn backtest_cmd(run: &Path, checkpoint: &str, span: &str, out: Option<PathBuf>, overrides: &[String]) -> Result<()> {
    let config_path = run.join("config.toml");
    if !config_path.is_file() {
        bail!("{} is not a run directory (no config.toml)", run.display());
    }
    let mut cfg = ExperimentConfig::load(&config_path)?;
    cfg.apply_overrides(overrides)?;
    let mut policy = EnsemblePolicy::load(&run.join("checkpoints").join(checkpoint))?;
    let dataset = Dataset::prepare(&cfg)?;
    let k = match span {
        "train" => 0,
        "validation" => 1,
        "test" => 2,
        other => bail!("unknown span {other:?}; expected train, validation or test"),
    };
    let norm = policy.meta.norm.unwrap_or(dataset.norm);
    let table = dataset.table.with_history(&dataset.spans[k], cfg.env.window)?;
    let data = Arc::new(EnvData::new(&table, &norm));
    policy.check_data(&data)?;
    let result = run_backtest(&mut policy, data, cfg.env, &cfg.risk)?;
    let report = BacktestReport::build(&result, &cfg)?;
    let out = out.unwrap_or_else(|| run.join(format!("backtest_{span}")));
    for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::PlotData] {
        emit_report(&report, f, &out)?;
    }
    Manifest::new(&command_line(), &cfg, overrides, &dataset.fingerprint).write(&out)?;
    println!(
        "{span} {}..{}: CR {:.2}%  AR {:.2}%  SR {:.3}  AVol {:.2}%  MDD {:.2}% -> {}",
        report.start_date,
        report.end_date,
        report.cr_pct,
        report.ar_pct,
        report.sr,
        report.avol_pct,
        report.mdd_pct,
        out.display()
    );
    Ok(())
}

fn report_cmd(input: &Path, formats: &[String], out: &Path) -> Result<()> {
    let report: BacktestReport = serde_json::from_str(&std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?)?;
    for f in formats {
        let format = ReportFormat::parse(f).with_context(|| format!("unknown format {f:?}; expected json, csv or plot-data"))?;
        let path = emit_report(&report, format, out)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn selftest(seed: u64) -> bool {
    let mut all = true;
    for (r, secs) in mars_core::selftest::run_all(seed) {
        all &= r.passed;
        println!("{} {} ({}) [{secs:.2}s]", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    all
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Ingest { cfg, data, train_span, validation_span, test_span, out } => ingest(
            &cfg,
            data,
            [("data.train_span", train_span), ("data.validation_span", validation_span), ("data.test_span", test_span)],
            &out,
        )?,
        Command::Synth { cfg, out } => synth(&cfg, &out)?,
        Command::Train { cfg, variant, out, resume } => train_cmd(&cfg, variant, out, resume)?,
        Command::Backtest { run, checkpoint, span, out, overrides } => backtest_cmd(&run, &checkpoint, &span, out, &overrides)?,
        Command::Report { input, format, out } => report_cmd(&input, &format, &out)?,
        Command::Selftest { seed } => return Ok(selftest(seed)),
    }
    Ok(true)
}

/// 1 for a non-finite training abort, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let aborted = err.chain().any(|e| e.downcast_ref::<TrainError>().is_some_and(TrainError::is_non_finite));
    if aborted {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
