use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{Bar, DataError, OhlcvRow, OhlcvTable};

pub const CSV_HEADER: [&str; 7] = ["date", "symbol", "open", "high", "low", "close", "volume"];

/// What to do with a symbol missing some trading dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoveragePolicy {
    #[default]
    Reject,
    /// Drop the symbol; no forward fill.
    Exclude,
}

pub fn load_ohlcv(path: &Path) -> Result<OhlcvTable, DataError> {
    load_ohlcv_with(path, CoveragePolicy::Reject)
}

pub fn load_ohlcv_with(path: &Path, policy: CoveragePolicy) -> Result<OhlcvTable, DataError> {
    let file = std::fs::File::open(path)?;
    read_ohlcv(file, policy)
}

pub fn read_ohlcv<R: Read>(reader: R, policy: CoveragePolicy) -> Result<OhlcvTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    for col in CSV_HEADER {
        if !header.iter().any(|h| h == col) {
            return Err(DataError::MissingColumn(col.to_string()));
        }
    }
    if header != CSV_HEADER {
        return Err(DataError::UnexpectedHeader { found: header.join(","), expected: CSV_HEADER.join(",") });
    }

    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
        let perr = |message: String| DataError::Parse { line, message };
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| perr(format!("date {:?}: {e}", &rec[0])))?;
        let num = |k: usize| -> Result<f64, DataError> {
            rec[k].parse::<f64>().map_err(|e| perr(format!("{} {:?}: {e}", CSV_HEADER[k], &rec[k])))
        };
        rows.push(OhlcvRow {
            date,
            symbol: rec[1].to_string(),
            open: num(2)?,
            high: num(3)?,
            low: num(4)?,
            close: num(5)?,
            volume: num(6)?,
        });
    }
    OhlcvTable::from_rows(rows, policy)
}

fn validate(row: &OhlcvRow) -> Result<(), DataError> {
    let prices = [row.open, row.high, row.low, row.close];
    if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(DataError::NonPositivePrice { symbol: row.symbol.clone(), date: row.date });
    }
    let bad = |reason: &str| DataError::InvalidBar { symbol: row.symbol.clone(), date: row.date, reason: reason.into() };
    if row.high < row.open.max(row.close) {
        return Err(bad("high below open/close"));
    }
    if row.low > row.open.min(row.close) {
        return Err(bad("low above open/close"));
    }
    if !row.volume.is_finite() || row.volume < 0.0 {
        return Err(bad("negative volume"));
    }
    Ok(())
}

impl OhlcvTable {
    /// Groups rows by symbol, sorts by date and checks coverage.
    pub fn from_rows(rows: Vec<OhlcvRow>, policy: CoveragePolicy) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        let mut by_symbol: BTreeMap<String, BTreeMap<NaiveDate, Bar>> = BTreeMap::new();
        let mut all_dates = BTreeSet::new();
        for row in rows {
            validate(&row)?;
            all_dates.insert(row.date);
            let bar = Bar { open: row.open, high: row.high, low: row.low, close: row.close, volume: row.volume };
            let series = by_symbol.entry(row.symbol.clone()).or_default();
            if series.insert(row.date, bar).is_some() {
                return Err(DataError::DuplicateDateSymbol { symbol: row.symbol, date: row.date });
            }
        }

        let dates: Vec<NaiveDate> = all_dates.into_iter().collect();
        if policy == CoveragePolicy::Exclude {
            let full = dates.len();
            let best = by_symbol.values().map(BTreeMap::len).max().unwrap_or(0);
            by_symbol.retain(|_, s| s.len() == full);
            if by_symbol.is_empty() {
                return Err(DataError::IncompleteCoverage { symbol: "*".into(), present: best, expected: full });
            }
        }
        for (symbol, series) in &by_symbol {
            if series.len() != dates.len() {
                return Err(DataError::IncompleteCoverage {
                    symbol: symbol.clone(),
                    present: series.len(),
                    expected: dates.len(),
                });
            }
        }
        let symbols: Vec<String> = by_symbol.keys().cloned().collect();
        let bars = by_symbol.into_values().map(|s| s.into_values().collect()).collect();
        Ok(Self { symbols, dates, bars })
    }
}

/// Writes rows in the canonical CSV layout.
pub fn write_ohlcv<W: Write>(writer: W, rows: &[OhlcvRow]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            r.symbol.clone(),
            r.open.to_string(),
            r.high.to_string(),
            r.low.to_string(),
            r.close.to_string(),
            r.volume.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "date,symbol,open,high,low,close,volume\n";

    fn read(body: &str) -> Result<OhlcvTable, DataError> {
        read_ohlcv(format!("{HEADER}{body}").as_bytes(), CoveragePolicy::Reject)
    }

    #[test]
    fn two_symbols_three_days() {
        let t = read(
            "2020-01-02,AAA,10,11,9,10.5,100\n\
             2020-01-02,BBB,20,21,19,20.5,100\n\
             2020-01-03,AAA,10.5,12,10,11,100\n\
             2020-01-03,BBB,20.5,21,20,20.7,100\n\
             2020-01-06,BBB,20.7,22,20,21,100\n\
             2020-01-06,AAA,11,11.5,10.5,11.2,100\n",
        )
        .unwrap();
        assert_eq!(t.n_assets(), 2);
        assert_eq!(t.n_rows(), 6);
        assert_eq!(t.symbols, vec!["AAA", "BBB"]);
        assert_eq!(t.bars[0][2].close, 11.2);
    }

    #[test]
    fn negative_close_is_rejected() {
        let err = read("2020-01-02,AAA,10,11,-2,-1,100\n").unwrap_err();
        assert!(matches!(err, DataError::NonPositivePrice { .. }));
    }

    #[test]
    fn incomplete_symbol_is_rejected_or_dropped() {
        let body = "2020-01-02,AAA,10,11,9,10,1\n2020-01-02,BBB,10,11,9,10,1\n\
                    2020-01-03,AAA,10,11,9,10,1\n2020-01-03,BBB,10,11,9,10,1\n\
                    2020-01-06,AAA,10,11,9,10,1\n";
        assert!(matches!(read(body).unwrap_err(), DataError::IncompleteCoverage { present: 2, expected: 3, .. }));
        let t = read_ohlcv(format!("{HEADER}{body}").as_bytes(), CoveragePolicy::Exclude).unwrap();
        assert_eq!(t.symbols, vec!["AAA"]);
        assert_eq!(t.dates.len(), 3);
    }

    #[test]
    fn header_problems() {
        let err = read_ohlcv("date,symbol,open,high,low,volume\n".as_bytes(), CoveragePolicy::Reject).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "close"));
        let err = read_ohlcv("symbol,date,open,high,low,close,volume\n".as_bytes(), CoveragePolicy::Reject).unwrap_err();
        assert!(matches!(err, DataError::UnexpectedHeader { .. }));
    }

    #[test]
    fn duplicates_and_bad_bars() {
        let err = read("2020-01-02,AAA,10,11,9,10,1\n2020-01-02,AAA,10,11,9,10,1\n").unwrap_err();
        assert!(matches!(err, DataError::DuplicateDateSymbol { .. }));
        let err = read("2020-01-02,AAA,10,9.5,9,10,1\n").unwrap_err();
        assert!(matches!(err, DataError::InvalidBar { .. }));
    }

    #[test]
    fn write_then_read() {
        let rows = vec![OhlcvRow {
            date: NaiveDate::from_ymd_opt(2021, 3, 4).unwrap(),
            symbol: "X".into(),
            open: 1.25,
            high: 1.5,
            low: 1.0,
            close: 1.3333333333333333,
            volume: 10.0,
        }];
        let mut buf = Vec::new();
        write_ohlcv(&mut buf, &rows).unwrap();
        let t = read_ohlcv(buf.as_slice(), CoveragePolicy::Reject).unwrap();
        assert_eq!(t.bars[0][0].close, rows[0].close);
    }
}
