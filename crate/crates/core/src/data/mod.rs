//! Market data: OHLCV ingestion, technical indicators, feature scaling,
//! chronological splits and a seeded synthetic market.

mod indicators;
mod load;
mod normalize;
mod split;
mod synth;

pub use indicators::{adx, cci, compute_indicators, ema, macd_line, rsi, IndicatorParams};
pub use load::{load_ohlcv, load_ohlcv_with, read_ohlcv, write_ohlcv, CoveragePolicy, CSV_HEADER};
pub use normalize::{fit_normalizer, NormStats};
pub use split::{split, DatasetSplits, DateSpan};
pub use synth::{Regime, SynthConfig};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Features per asset per day: close, MACD, RSI, CCI, ADX.
pub const FEATURES_PER_ASSET: usize = 5;
pub const FEATURE_NAMES: [&str; FEATURES_PER_ASSET] = ["close", "macd", "rsi", "cci", "adx"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("unexpected header {found:?}, expected {expected:?}")]
    UnexpectedHeader { found: String, expected: String },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("non-positive price for {symbol} on {date}")]
    NonPositivePrice { symbol: String, date: NaiveDate },
    #[error("inconsistent bar for {symbol} on {date}: {reason}")]
    InvalidBar { symbol: String, date: NaiveDate, reason: String },
    #[error("duplicate row for {symbol} on {date}")]
    DuplicateDateSymbol { symbol: String, date: NaiveDate },
    #[error("{symbol} covers {present} of {expected} dates")]
    IncompleteCoverage { symbol: String, present: usize, expected: usize },
    #[error("need at least {required} dates of history, have {available}")]
    InsufficientHistory { required: usize, available: usize },
    #[error("feature {0:?} has zero variance over the training span")]
    DegenerateFeature(String),
    #[error("spans overlap or are out of order: {0}")]
    OverlappingSpans(String),
    #[error("span {0} is not covered by the table")]
    SpanOutOfRange(String),
    #[error("empty table")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One input record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhlcvRow {
    pub date: NaiveDate,
    pub symbol: String,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

/// Validated raw prices, `bars[symbol][date]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhlcvTable {
    pub symbols: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub bars: Vec<Vec<Bar>>,
}

impl OhlcvTable {
    pub fn n_assets(&self) -> usize {
        self.symbols.len()
    }

    pub fn n_rows(&self) -> usize {
        self.symbols.len() * self.dates.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub close: f64,
    pub macd: f64,
    pub rsi: f64,
    pub cci: f64,
    pub adx: f64,
}

impl FeatureRow {
    pub fn to_array(&self) -> [f64; FEATURES_PER_ASSET] {
        [self.close, self.macd, self.rsi, self.cci, self.adx]
    }
}

/// Indicator-augmented table, `rows[date][asset]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketTable {
    pub symbols: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub rows: Vec<Vec<FeatureRow>>,
}

impl MarketTable {
    pub fn n_assets(&self) -> usize {
        self.symbols.len()
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Closing prices on date index `t`.
    pub fn closes(&self, t: usize) -> Vec<f64> {
        self.rows[t].iter().map(|r| r.close).collect()
    }

    /// Contiguous date range `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> MarketTable {
        MarketTable {
            symbols: self.symbols.clone(),
            dates: self.dates[from..to].to_vec(),
            rows: self.rows[from..to].to_vec(),
        }
    }

    /// Rows whose date lies in `span`, preceded by up to `history` earlier
    /// dates so an environment can start trading on the first day of the span.
    pub fn with_history(&self, span: &DateSpan, history: usize) -> Result<MarketTable, DataError> {
        let start = self
            .dates
            .iter()
            .position(|d| *d >= span.start && *d <= span.end)
            .ok_or_else(|| DataError::SpanOutOfRange(span.to_string()))?;
        let end = self.dates.iter().rposition(|d| *d <= span.end).unwrap() + 1;
        Ok(self.slice(start.saturating_sub(history), end))
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err("dates not strictly increasing".into());
        }
        for (t, row) in self.rows.iter().enumerate() {
            if row.len() != self.symbols.len() {
                return Err(format!("date {} has {} rows", self.dates[t], row.len()));
            }
            for r in row {
                if !(0.0..=100.0).contains(&r.rsi) || !(0.0..=100.0).contains(&r.adx) {
                    return Err(format!("oscillator out of range on {}", self.dates[t]));
                }
                if r.to_array().iter().any(|v| !v.is_finite()) {
                    return Err(format!("non-finite feature on {}", self.dates[t]));
                }
            }
        }
        Ok(())
    }
}
