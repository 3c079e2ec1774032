use chrono::NaiveDate;
use mars_core::data::{
    adx, cci, compute_indicators, ema, fit_normalizer, read_ohlcv, rsi, split, write_ohlcv, CoveragePolicy, DateSpan,
    IndicatorParams, SynthConfig, FEATURES_PER_ASSET,
};
use proptest::prelude::*;

/// Closes from a bounded random walk plus highs and lows around them.
fn bars() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    prop::collection::vec((-0.05f64..0.05, 0.0f64..0.03, 0.0f64..0.03), 20..120).prop_map(|steps| {
        let mut c = 100.0;
        let (mut h, mut l, mut cl) = (vec![], vec![], vec![]);
        for (r, up, down) in steps {
            c *= 1.0 + r;
            cl.push(c);
            h.push(c * (1.0 + up));
            l.push(c * (1.0 - down));
        }
        (h, l, cl)
    })
}

/// Wilder RSI written as `100 * G / (G + L)` with the averages kept as
/// explicit series.
fn rsi_oracle(close: &[f64], n: usize) -> Vec<Option<f64>> {
    let d: Vec<f64> = close.windows(2).map(|w| w[1] - w[0]).collect();
    let mut g = vec![0.0; d.len()];
    let mut l = vec![0.0; d.len()];
    g[n - 1] = d[..n].iter().map(|x| x.max(0.0)).sum::<f64>() / n as f64;
    l[n - 1] = d[..n].iter().map(|x| (-x).max(0.0)).sum::<f64>() / n as f64;
    for i in n..d.len() {
        g[i] = (g[i - 1] * (n - 1) as f64 + d[i].max(0.0)) / n as f64;
        l[i] = (l[i - 1] * (n - 1) as f64 + (-d[i]).max(0.0)) / n as f64;
    }
    let mut out = vec![None; close.len()];
    for i in n - 1..d.len() {
        out[i + 1] = Some(if g[i] + l[i] == 0.0 { 50.0 } else { 100.0 * g[i] / (g[i] + l[i]) });
    }
    out
}

/// EMA seeded with the first `n`-sample mean, expanded as a weighted sum.
fn ema_oracle(x: &[f64], n: usize) -> Vec<Option<f64>> {
    let a = 2.0 / (n as f64 + 1.0);
    let seed = x[..n].iter().sum::<f64>() / n as f64;
    let mut out = vec![None; x.len()];
    for t in n - 1..x.len() {
        let k = (t + 1 - n) as i32;
        let mut v = (1.0 - a).powi(k) * seed;
        for j in n..=t {
            v += a * (1.0 - a).powi((t - j) as i32) * x[j];
        }
        out[t] = Some(v);
    }
    out
}

fn close_to(a: &[Option<f64>], b: &[Option<f64>], tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        match (x, y) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() <= tol * y.abs().max(1.0), "index {}: {} vs {}", i, x, y),
            (None, None) => {}
            _ => prop_assert!(false, "index {}: {:?} vs {:?}", i, x, y),
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn oscillators_stay_in_range((h, l, c) in bars(), n in 2usize..16) {
        for v in rsi(&c, n).into_iter().flatten() {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        for v in adx(&h, &l, &c, n).into_iter().flatten() {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert!(cci(&h, &l, &c, n, 0.015).into_iter().flatten().all(f64::is_finite));
    }

    #[test]
    fn rsi_matches_wilder_oracle((_, _, c) in bars(), n in 2usize..16) {
        prop_assume!(c.len() > n);
        close_to(&rsi(&c, n), &rsi_oracle(&c, n), 1e-9)?;
    }

    #[test]
    fn ema_matches_weighted_sum((_, _, c) in bars(), n in 1usize..20) {
        close_to(&ema(&c, n), &ema_oracle(&c, n), 1e-10)?;
    }

    #[test]
    fn training_features_are_standardized(seed in any::<u64>(), n_assets in 1usize..4) {
        let raw = SynthConfig { seed, n_assets, n_days: 160, ..Default::default() }.generate().unwrap();
        let table = compute_indicators(&raw, &IndicatorParams::default()).unwrap();
        let norm = fit_normalizer(&table).unwrap();
        let z = norm.transform(&table);
        let cells = (table.len() * n_assets) as f64;
        for k in 0..FEATURES_PER_ASSET {
            let col: Vec<f64> = z.iter().flat_map(|row| row.chunks(FEATURES_PER_ASSET).map(move |a| a[k])).collect();
            let mean = col.iter().sum::<f64>() / cells;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cells;
            prop_assert!(mean.abs() < 1e-9, "feature {} mean {}", k, mean);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9, "feature {} std {}", k, var.sqrt());
        }
    }
}

#[test]
fn rsi_anchors() {
    let up: Vec<f64> = (0..30).map(|i| 10.0 + i as f64).collect();
    let down: Vec<f64> = up.iter().rev().copied().collect();
    let flat = vec![10.0; 30];
    assert!(rsi(&up, 14).into_iter().flatten().all(|v| v == 100.0));
    assert!(rsi(&down, 14).into_iter().flatten().all(|v| v == 0.0));
    assert!(rsi(&flat, 14).into_iter().flatten().all(|v| v == 50.0));
}

#[test]
fn csv_round_trip_preserves_the_table() {
    let cfg = SynthConfig { n_assets: 3, n_days: 90, ..Default::default() };
    let rows = cfg.generate_rows();
    let mut buf = Vec::new();
    write_ohlcv(&mut buf, &rows).unwrap();
    let back = read_ohlcv(buf.as_slice(), CoveragePolicy::Reject).unwrap();
    assert_eq!(back, cfg.generate().unwrap());
}

#[test]
fn missing_dates_are_rejected_or_excluded() {
    let cfg = SynthConfig { n_assets: 3, n_days: 60, ..Default::default() };
    let mut rows = cfg.generate_rows();
    let victim = rows[7].symbol.clone();
    let day = rows[7].date;
    rows.retain(|r| !(r.symbol == victim && r.date == day));
    let mut buf = Vec::new();
    write_ohlcv(&mut buf, &rows).unwrap();
    assert!(read_ohlcv(buf.as_slice(), CoveragePolicy::Reject).is_err());
    let kept = read_ohlcv(buf.as_slice(), CoveragePolicy::Exclude).unwrap();
    assert_eq!(kept.n_assets(), 2);
    assert!(!kept.symbols.contains(&victim));
    assert_eq!(kept.dates.len(), 60);
}

#[test]
fn spans_partition_without_overlap() {
    let raw = SynthConfig { n_assets: 2, n_days: 200, ..Default::default() }.generate().unwrap();
    let table = compute_indicators(&raw, &IndicatorParams::default()).unwrap();
    let d = &table.dates;
    let n = d.len();
    let spans = [
        DateSpan::new(d[0], d[n / 2]),
        DateSpan::new(d[n / 2 + 1], d[3 * n / 4]),
        DateSpan::new(d[3 * n / 4 + 1], d[n - 1]),
    ];
    let s = split(&table, spans).unwrap();
    assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n);
    assert!(s.train.dates.last() < s.validation.dates.first());
    assert!(s.validation.dates.last() < s.test.dates.first());

    let overlapping = [spans[0], DateSpan::new(d[n / 2], d[3 * n / 4]), spans[2]];
    assert!(split(&table, overlapping).is_err());
    let late = NaiveDate::from_ymd_opt(2100, 1, 1).unwrap();
    assert!(split(&table, [spans[0], spans[1], DateSpan::new(late, late)]).is_err());
}
