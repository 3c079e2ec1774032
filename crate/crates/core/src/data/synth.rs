//! Seeded geometric-Brownian-motion market with a piecewise regime schedule.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CoveragePolicy, DataError, OhlcvRow, OhlcvTable};
use crate::rng::SeedStreams;

/// Daily log-drift and volatility in effect from `start_day` onwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub start_day: usize,
    pub drift: f64,
    pub volatility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_assets: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub initial_price: f64,
    /// Loading on a shared market factor, in `[0, 1]`.
    pub correlation: f64,
    pub regimes: Vec<Regime>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_assets: 5,
            n_days: 500,
            start_date: NaiveDate::from_ymd_opt(2016, 1, 4).unwrap(),
            initial_price: 100.0,
            correlation: 0.5,
            regimes: vec![Regime { start_day: 0, drift: 0.0004, volatility: 0.012 }],
        }
    }
}

impl SynthConfig {
    /// Parses `start:drift:vol;start:drift:vol;...`.
    pub fn parse_regimes(s: &str) -> Result<Vec<Regime>, String> {
        let mut out = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let f: Vec<&str> = part.split(':').collect();
            if f.len() != 3 {
                return Err(format!("regime {part:?} must be start:drift:volatility"));
            }
            out.push(Regime {
                start_day: f[0].trim().parse().map_err(|e| format!("{part:?}: {e}"))?,
                drift: f[1].trim().parse().map_err(|e| format!("{part:?}: {e}"))?,
                volatility: f[2].trim().parse().map_err(|e| format!("{part:?}: {e}"))?,
            });
        }
        if out.is_empty() {
            return Err("empty regime schedule".into());
        }
        Ok(out)
    }

    pub fn format_regimes(regimes: &[Regime]) -> String {
        regimes.iter().map(|r| format!("{}:{}:{}", r.start_day, r.drift, r.volatility)).collect::<Vec<_>>().join(";")
    }

    /// Regime index in effect on `day`.
    pub fn regime_at(&self, day: usize) -> usize {
        let mut idx = 0;
        for (i, r) in self.regimes.iter().enumerate() {
            if r.start_day <= day {
                idx = i;
            }
        }
        idx
    }

    /// Weekday calendar starting at `start_date`.
    pub fn calendar(&self) -> Vec<NaiveDate> {
        let mut d = self.start_date;
        let mut out = Vec::with_capacity(self.n_days);
        while out.len() < self.n_days {
            if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
                out.push(d);
            }
            d = d + Days::new(1);
        }
        out
    }

    pub fn generate_rows(&self) -> Vec<OhlcvRow> {
        let mut rng = SeedStreams::new(self.seed).stream("synth");
        let dates = self.calendar();
        let rho = self.correlation.clamp(0.0, 1.0);
        let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
        // asset-specific volatility multipliers
        let scale: Vec<f64> = (0..self.n_assets).map(|_| rng.random_range(0.8..1.2)).collect();
        let mut close = vec![self.initial_price; self.n_assets];
        let mut rows = Vec::with_capacity(self.n_days * self.n_assets);
        for (day, date) in dates.iter().enumerate() {
            let r = self.regimes[self.regime_at(day)];
            let market: f64 = StandardNormal.sample(&mut rng);
            for i in 0..self.n_assets {
                let idio: f64 = StandardNormal.sample(&mut rng);
                let vol = r.volatility * scale[i];
                let jitter: f64 = StandardNormal.sample(&mut rng);
                let open = close[i] * (vol * 0.2 * jitter).exp();
                let z = a * market + b * idio;
                let new_close = close[i] * (r.drift - 0.5 * vol * vol + vol * z).exp();
                let wick_hi: f64 = rng.random_range(0.0..1.0) * vol * 0.5;
                let wick_lo: f64 = rng.random_range(0.0..1.0) * vol * 0.5;
                let high = open.max(new_close) * (1.0 + wick_hi);
                let low = open.min(new_close) * (1.0 - wick_lo);
                let volume = (1e6 * rng.random_range(0.5f64..1.5)).round();
                rows.push(OhlcvRow {
                    date: *date,
                    symbol: format!("SYN{i:02}"),
                    open,
                    high,
                    low,
                    close: new_close,
                    volume,
                });
                close[i] = new_close;
            }
        }
        rows
    }

    pub fn generate(&self) -> Result<OhlcvTable, DataError> {
        OhlcvTable::from_rows(self.generate_rows(), CoveragePolicy::Reject)
    }
}
