use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{DataError, MarketTable};

const END_SLACK_DAYS: u64 = 7;

/// Inclusive calendar range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateSpan {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateSpan {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        d >= self.start && d <= self.end
    }

    /// Parses `YYYY-MM-DD..YYYY-MM-DD`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once("..").ok_or_else(|| format!("span {s:?} must look like START..END"))?;
        let p = |x: &str| NaiveDate::parse_from_str(x.trim(), "%Y-%m-%d").map_err(|e| format!("{x:?}: {e}"));
        Ok(Self { start: p(a)?, end: p(b)? })
    }
}

impl fmt::Display for DateSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: MarketTable,
    pub validation: MarketTable,
    pub test: MarketTable,
}

/// Cuts `table` into train / validation / test by date.
pub fn split(table: &MarketTable, spans: [DateSpan; 3]) -> Result<DatasetSplits, DataError> {
    let [tr, va, te] = spans;
    for s in &spans {
        if s.start > s.end {
            return Err(DataError::OverlappingSpans(format!("{s} ends before it starts")));
        }
    }
    if !(tr.end < va.start && va.end < te.start) {
        return Err(DataError::OverlappingSpans(format!("train {tr}, validation {va}, test {te}")));
    }
    let (first, last) = match (table.dates.first(), table.dates.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(DataError::Empty),
    };
    let cut = |s: &DateSpan| -> Result<MarketTable, DataError> {
        // Spans are calendar ranges over trading days: the end may overhang the
        // last row by a week, and the start may precede the first row (warm-up).
        if s.end > last + chrono::Days::new(END_SLACK_DAYS) || s.end < first {
            return Err(DataError::SpanOutOfRange(s.to_string()));
        }
        let from = table.dates.partition_point(|d| *d < s.start);
        let to = table.dates.partition_point(|d| *d <= s.end);
        if from >= to {
            return Err(DataError::SpanOutOfRange(s.to_string()));
        }
        Ok(table.slice(from, to))
    };
    Ok(DatasetSplits { train: cut(&tr)?, validation: cut(&va)?, test: cut(&te)? })
}
