use std::sync::Arc;

use chrono::NaiveDate;
use mars_core::backtest::{
    emit_report, max_drawdown, metrics, run_backtest, write_report, BacktestError, BacktestReport, EnsemblePolicy,
    ReportFormat, ScriptedPolicy,
};
use mars_core::config::ExperimentConfig;
use mars_core::data::{Regime, FEATURES_PER_ASSET};
use mars_core::env::{EnvConfig, EnvData};
use mars_core::manifest::hash_tree;
use mars_core::risk::{OverlayConfig, RiskConfig};
use mars_core::train::train;
use proptest::prelude::*;

fn one_asset(prices: &[f64]) -> Arc<EnvData> {
    let d0 = NaiveDate::from_ymd_opt(2024, 3, 4).unwrap();
    Arc::new(EnvData {
        symbols: vec!["ONE".into()],
        dates: (0..prices.len()).map(|i| d0 + chrono::Days::new(i as u64)).collect(),
        prices: prices.iter().map(|p| vec![*p]).collect(),
        features: vec![vec![0.0; FEATURES_PER_ASSET]; prices.len()],
    })
}

fn ledger_env() -> (EnvConfig, RiskConfig) {
    let env = EnvConfig { initial_cash: 1e5, cost_rate: 0.001, max_trade_fraction: 0.1, window: 2, ..Default::default() };
    let risk = RiskConfig { overlay: OverlayConfig { concentration_cap: 0.2, cash_buffer: 0.05 }, ..Default::default() };
    (env, risk)
}

#[test]
fn always_buy_ledger_by_hand() {
    // decisions on 12, 13, 14, 15; fills one day later
    let data = one_asset(&[10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0]);
    let (env, risk) = ledger_env();
    let run = run_backtest(&mut ScriptedPolicy(|_: &[f64], _: &_| vec![1.0]), data, env, &risk).unwrap();

    // 1: floor(1e4 / 12) = 833 bought at 13, fee 10.829
    //    cash 89160.171, value 89160.171 + 833 * 13
    // 2: wants floor(9998.9171 / 13) = 769 but the cap allows
    //    floor(19997.8342 / 13) = 1538 held, so 705 bought at 14, fee 9.87
    // 3: cap floor(20162.4602 / 14) = 1440 < 1538, so 98 sold at 15, fee 1.47
    // 4: cap floor(20469.7662 / 15) = 1364, so 76 sold at 16, fee 1.216
    let want = [1e5, 99_989.171, 100_812.301, 102_348.831, 103_787.615];
    assert_eq!(run.curve.values.len(), want.len());
    for (got, want) in run.curve.values.iter().zip(want) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    let shares = [833.0, 705.0, -98.0, -76.0];
    let decision_values = [1e5, 99_989.171, 100_812.301, 102_348.831];
    let decision_prices = [12.0, 13.0, 14.0, 15.0];
    for k in 0..4 {
        let a = shares[k] * decision_prices[k] / (0.1 * decision_values[k]);
        let a = if k == 0 { 1.0 } else { a };
        assert!((run.executed[k][0] - a).abs() < 1e-9, "step {k}: {} vs {a}", run.executed[k][0]);
    }
    let fees = [10.829, 9.87, 1.47, 1.216];
    for k in 0..4 {
        assert!((run.costs[k] - fees[k] / decision_values[k]).abs() < 1e-12);
    }
    assert_eq!(run.weights.len(), 5);

    let m = metrics(&run.curve.values, 252.0, 0.0).unwrap();
    let r: Vec<f64> = want.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let mean = r.iter().sum::<f64>() / 4.0;
    let sd = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((m.cumulative_return - 0.03787615).abs() < 1e-10);
    assert!((m.annualized_return - (1.03787615f64.powf(63.0) - 1.0)).abs() < 1e-6);
    assert!((m.annualized_volatility - sd * 252f64.sqrt()).abs() < 1e-10);
    assert!((m.sharpe - mean * 252.0 / (sd * 252f64.sqrt())).abs() < 1e-8);
    assert!((m.max_drawdown - (99_989.171 / 1e5 - 1.0)).abs() < 1e-10);
}

#[test]
fn idle_policy_keeps_a_flat_curve() {
    let data = one_asset(&[10.0, 11.0, 9.0, 13.0, 14.0, 8.0, 16.0, 12.0]);
    let (env, risk) = ledger_env();
    let run = run_backtest(&mut ScriptedPolicy(|_: &[f64], _: &_| vec![0.0]), data, env, &risk).unwrap();
    assert!(run.curve.values.iter().all(|v| *v == 1e5));
    assert!(run.costs.iter().all(|c| *c == 0.0));
    let m = metrics(&run.curve.values, 252.0, 0.0).unwrap();
    assert_eq!((m.cumulative_return, m.annualized_volatility, m.max_drawdown), (0.0, 0.0, 0.0));
    assert!(!m.sharpe_defined);
    assert_eq!(m.sharpe, 0.0);
}

fn naive_metrics(v: &[f64], ppy: f64, rf: f64) -> [f64; 5] {
    let r: Vec<f64> = (1..v.len()).map(|t| v[t] / v[t - 1] - 1.0).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sd = if r.len() > 1 { (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let cr = v[v.len() - 1] / v[0] - 1.0;
    let ar = (1.0 + cr).powf(ppy / n) - 1.0;
    let avol = sd * ppy.sqrt();
    let sr = if avol > 0.0 { (mean * ppy - rf) / avol } else { 0.0 };
    let mut mdd = 0.0f64;
    for j in 0..v.len() {
        for i in 0..=j {
            mdd = mdd.min(v[j] / v[i] - 1.0);
        }
    }
    [cr, ar, avol, sr, mdd]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metrics_match_direct_formulas(
        v in prop::collection::vec(50.0f64..200.0, 2..60),
        ppy in prop::sample::select(vec![12.0, 52.0, 252.0]),
        rf in 0.0f64..0.05,
    ) {
        let m = metrics(&v, ppy, rf).unwrap();
        let want = naive_metrics(&v, ppy, rf);
        let got = [m.cumulative_return, m.annualized_return, m.annualized_volatility, m.sharpe, m.max_drawdown];
        for (k, (g, w)) in got.iter().zip(want).enumerate() {
            prop_assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "metric {k}: {g} vs {w}");
        }
        prop_assert!(m.max_drawdown <= 0.0 && m.max_drawdown == max_drawdown(&v));
    }
}

fn trained_run(dir: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.synth.n_assets = 3;
    c.synth.n_days = 200;
    c.synth.regimes = vec![Regime { start_day: 0, drift: 0.0004, volatility: 0.015 }];
    c.env.window = 10;
    c.agent.hidden = vec![12];
    c.agent.batch_size = 8;
    c.mac_hidden = vec![8];
    c.mac.batch_size = 8;
    c.mac.steps_per_update = 4;
    c.train.n_agents = 3;
    c.train.max_episodes = 2;
    c.train.output_dir = dir.to_path_buf();
    c
}

#[test]
fn checkpoint_backtests_are_pure_and_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained_run(&tmp.path().join("run"));
    let (_, dataset) = train(&cfg, &mut ()).unwrap();
    let ckpt = cfg.train.output_dir.join("checkpoints/final");
    let before = hash_tree(&ckpt).unwrap();

    let once = |out: &str| {
        let mut policy = EnsemblePolicy::load(&ckpt).unwrap();
        policy.check_data(&dataset.test).unwrap();
        let run = run_backtest(&mut policy, dataset.test.clone(), cfg.env, &cfg.risk).unwrap();
        let report = BacktestReport::build(&run, &cfg).unwrap();
        let dir = tmp.path().join(out);
        for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::PlotData] {
            emit_report(&report, f, &dir).unwrap();
        }
        (report, dir)
    };
    let (a, da) = once("a");
    let (b, db) = once("b");
    assert_eq!(a, b);
    for name in ["report.json", "metrics.csv", "plot_data.csv"] {
        assert_eq!(std::fs::read(da.join(name)).unwrap(), std::fs::read(db.join(name)).unwrap(), "{name}");
    }
    assert_eq!(hash_tree(&ckpt).unwrap(), before);

    // round trip and layout
    let back: BacktestReport = serde_json::from_str(&std::fs::read_to_string(da.join("report.json")).unwrap()).unwrap();
    assert_eq!(back, a);
    let mut again = Vec::new();
    write_report(&back, ReportFormat::Json, &mut again).unwrap();
    assert_eq!(again, std::fs::read(da.join("report.json")).unwrap());
    let plot = std::fs::read_to_string(da.join("plot_data.csv")).unwrap();
    assert_eq!(plot.lines().count(), 1 + a.equity.len() * 5);
    assert_eq!(a.weights.len(), a.equity.len());
    for w in &a.weights {
        assert!((w.groups.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(a.steps + 1, a.equity.len());
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained_run(&tmp.path().join("run"));
    train(&cfg, &mut ()).unwrap();
    let ckpt = cfg.train.output_dir.join("checkpoints/final");
    let good = EnsemblePolicy::load(&ckpt).unwrap();

    let mut actors = good.actors.clone();
    actors.pop();
    let mac = good.controller.clone().unwrap();
    assert!(matches!(EnsemblePolicy::new(good.meta.clone(), actors, mac.clone()), Err(BacktestError::ArchitectureMismatch(_))));

    let wide = one_asset(&[10.0; 20]);
    assert!(matches!(good.check_data(&wide), Err(BacktestError::ArchitectureMismatch(_))));

    std::fs::remove_file(ckpt.join("agent_1_actor.json")).unwrap();
    assert!(matches!(EnsemblePolicy::load(&ckpt), Err(BacktestError::CheckpointMissing(_))));
    assert!(matches!(EnsemblePolicy::load(&tmp.path().join("nowhere")), Err(BacktestError::CheckpointMissing(_))));
}
