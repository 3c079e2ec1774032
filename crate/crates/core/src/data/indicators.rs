//! MACD, RSI (Wilder), CCI and ADX (Wilder).
//!
//! Each function returns one entry per input point, `None` during its warm-up.
//! Smoothing recursions are written as `prev + k * (x - prev)` so a constant
//! series stays bit-for-bit constant.

use serde::{Deserialize, Serialize};

use super::{DataError, FeatureRow, MarketTable, OhlcvTable};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorParams {
    pub macd_fast: usize,
    pub macd_slow: usize,
    pub macd_signal: usize,
    pub rsi_period: usize,
    pub cci_period: usize,
    pub cci_constant: f64,
    pub adx_period: usize,
}

impl Default for IndicatorParams {
    fn default() -> Self {
        Self { macd_fast: 12, macd_slow: 26, macd_signal: 9, rsi_period: 14, cci_period: 20, cci_constant: 0.015, adx_period: 14 }
    }
}

impl IndicatorParams {
    /// Index of the first date on which every indicator (including the MACD
    /// signal span) is defined. 33 with the defaults.
    pub fn first_valid_index(&self) -> usize {
        [
            self.macd_fast.saturating_sub(1),
            self.macd_slow + self.macd_signal - 2,
            self.rsi_period,
            self.cci_period.saturating_sub(1),
            2 * self.adx_period - 1,
        ]
        .into_iter()
        .max()
        .unwrap()
    }

    /// Minimum number of dates needed to produce one output row.
    pub fn required_history(&self) -> usize {
        self.first_valid_index() + 1
    }
}

/// Mean computed as `x0 + mean(x - x0)`, exact for constant windows.
fn anchored_mean<T: Scalar>(xs: &[T]) -> T {
    let x0 = xs[0];
    let n = T::from_usize(xs.len()).unwrap();
    x0 + xs.iter().map(|&x| x - x0).sum::<T>() / n
}

/// Exponential moving average seeded with the simple average of the first
/// `period` points.
pub fn ema<T: Scalar>(values: &[T], period: usize) -> Vec<Option<T>> {
    let mut out = vec![None; values.len()];
    if period == 0 || values.len() < period {
        return out;
    }
    let alpha = T::lit(2.0) / T::from_usize(period + 1).unwrap();
    let mut prev = anchored_mean(&values[..period]);
    out[period - 1] = Some(prev);
    for i in period..values.len() {
        prev = prev + alpha * (values[i] - prev);
        out[i] = Some(prev);
    }
    out
}

/// MACD line: fast EMA minus slow EMA.
pub fn macd_line<T: Scalar>(close: &[T], fast: usize, slow: usize) -> Vec<Option<T>> {
    let f = ema(close, fast);
    let s = ema(close, slow);
    f.into_iter().zip(s).map(|(a, b)| Some(a? - b?)).collect()
}

/// Relative strength index with Wilder smoothing.
///
/// No losses gives 100; no movement at all gives 50.
pub fn rsi<T: Scalar>(close: &[T], period: usize) -> Vec<Option<T>> {
    let mut out = vec![None; close.len()];
    if period == 0 || close.len() <= period {
        return out;
    }
    let hundred = T::lit(100.0);
    let p = T::from_usize(period).unwrap();
    let value = |g: T, l: T| -> T {
        if l == T::zero() {
            if g == T::zero() {
                T::lit(50.0)
            } else {
                hundred
            }
        } else {
            (hundred - hundred / (T::one() + g / l)).max(T::zero()).min(hundred)
        }
    };
    let change = |i: usize| close[i] - close[i - 1];
    let mut gain = T::zero();
    let mut loss = T::zero();
    for i in 1..=period {
        let d = change(i);
        gain += d.max(T::zero());
        loss += (-d).max(T::zero());
    }
    gain /= p;
    loss /= p;
    out[period] = Some(value(gain, loss));
    for i in period + 1..close.len() {
        let d = change(i);
        gain = gain + (d.max(T::zero()) - gain) / p;
        loss = loss + ((-d).max(T::zero()) - loss) / p;
        out[i] = Some(value(gain, loss));
    }
    out
}

/// Commodity channel index on the typical price `(h + l + c) / 3`.
/// Zero mean deviation gives 0.
pub fn cci<T: Scalar>(high: &[T], low: &[T], close: &[T], period: usize, constant: T) -> Vec<Option<T>> {
    let n = close.len();
    let mut out = vec![None; n];
    if period == 0 || n < period {
        return out;
    }
    let three = T::lit(3.0);
    let tp: Vec<T> = (0..n).map(|i| (high[i] + low[i] + close[i]) / three).collect();
    let pn = T::from_usize(period).unwrap();
    for i in period - 1..n {
        let w = &tp[i + 1 - period..=i];
        let sma = anchored_mean(w);
        let md = w.iter().map(|&x| (x - sma).abs()).sum::<T>() / pn;
        out[i] = Some(if md == T::zero() { T::zero() } else { (tp[i] - sma) / (constant * md) });
    }
    out
}

/// Average directional index with Wilder smoothing.
pub fn adx<T: Scalar>(high: &[T], low: &[T], close: &[T], period: usize) -> Vec<Option<T>> {
    let n = close.len();
    let mut out = vec![None; n];
    if period == 0 || n < 2 * period {
        return out;
    }
    let hundred = T::lit(100.0);
    let p = T::from_usize(period).unwrap();
    let mut tr = vec![T::zero(); n];
    let mut pdm = vec![T::zero(); n];
    let mut mdm = vec![T::zero(); n];
    for i in 1..n {
        let up = high[i] - high[i - 1];
        let down = low[i - 1] - low[i];
        pdm[i] = if up > down && up > T::zero() { up } else { T::zero() };
        mdm[i] = if down > up && down > T::zero() { down } else { T::zero() };
        tr[i] = (high[i] - low[i]).max((high[i] - close[i - 1]).abs()).max((low[i] - close[i - 1]).abs());
    }
    let sum = |xs: &[T]| xs[1..=period].iter().copied().sum::<T>();
    let (mut s_tr, mut s_p, mut s_m) = (sum(&tr), sum(&pdm), sum(&mdm));
    let dx = |s_tr: T, s_p: T, s_m: T| -> T {
        if s_tr == T::zero() {
            return T::zero();
        }
        let pdi = hundred * s_p / s_tr;
        let mdi = hundred * s_m / s_tr;
        let total = pdi + mdi;
        if total == T::zero() {
            T::zero()
        } else {
            hundred * (pdi - mdi).abs() / total
        }
    };
    let mut dxs = vec![T::zero(); n];
    dxs[period] = dx(s_tr, s_p, s_m);
    for i in period + 1..n {
        s_tr = s_tr - s_tr / p + tr[i];
        s_p = s_p - s_p / p + pdm[i];
        s_m = s_m - s_m / p + mdm[i];
        dxs[i] = dx(s_tr, s_p, s_m);
    }
    let first = 2 * period - 1;
    let mut a = dxs[period..=first].iter().copied().sum::<T>() / p;
    out[first] = Some(a.max(T::zero()).min(hundred));
    for i in first + 1..n {
        a = a + (dxs[i] - a) / p;
        out[i] = Some(a.max(T::zero()).min(hundred));
    }
    out
}

/// Computes all four indicators per symbol and trims the warm-up prefix.
pub fn compute_indicators(table: &OhlcvTable, params: &IndicatorParams) -> Result<MarketTable, DataError> {
    let n = table.dates.len();
    let w = params.first_valid_index();
    if n <= w {
        return Err(DataError::InsufficientHistory { required: params.required_history(), available: n });
    }
    let per_symbol: Vec<Vec<FeatureRow>> = table
        .bars
        .iter()
        .map(|bars| {
            let h: Vec<f64> = bars.iter().map(|b| b.high).collect();
            let l: Vec<f64> = bars.iter().map(|b| b.low).collect();
            let c: Vec<f64> = bars.iter().map(|b| b.close).collect();
            let macd = macd_line(&c, params.macd_fast, params.macd_slow);
            let rsi = rsi(&c, params.rsi_period);
            let cci = cci(&h, &l, &c, params.cci_period, params.cci_constant);
            let adx = adx(&h, &l, &c, params.adx_period);
            (w..n)
                .map(|t| FeatureRow {
                    close: c[t],
                    macd: macd[t].expect("past warm-up"),
                    rsi: rsi[t].expect("past warm-up"),
                    cci: cci[t].expect("past warm-up"),
                    adx: adx[t].expect("past warm-up"),
                })
                .collect()
        })
        .collect();
    let rows = (0..n - w).map(|t| per_symbol.iter().map(|s| s[t]).collect()).collect();
    Ok(MarketTable { symbols: table.symbols.clone(), dates: table.dates[w..].to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 30 points: rally for 15 days, one sharp reversal, then a drift down.
    fn reversal_series() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut c = Vec::new();
        for i in 0..30 {
            let x = if i < 15 { 100.0 + 1.5 * i as f64 + if i % 3 == 0 { -0.8 } else { 0.0 } } else { 121.0 - 1.2 * (i - 15) as f64 + if i % 4 == 1 { 0.9 } else { 0.0 } };
            c.push(x);
        }
        let h = c.iter().enumerate().map(|(i, x)| x + 0.6 + 0.1 * (i % 5) as f64).collect();
        let l = c.iter().enumerate().map(|(i, x)| x - 0.5 - 0.07 * (i % 3) as f64).collect();
        (h, l, c)
    }

    // Independent spreadsheet-style oracles: one column per intermediate, each
    // cell computed from the textbook definition with plain sums.

    fn oracle_rsi(c: &[f64], p: usize) -> Vec<Option<f64>> {
        let n = c.len();
        let gains: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else if c[i] > c[i - 1] { c[i] - c[i - 1] } else { 0.0 }).collect();
        let losses: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else if c[i] < c[i - 1] { c[i - 1] - c[i] } else { 0.0 }).collect();
        let mut avg_g = vec![f64::NAN; n];
        let mut avg_l = vec![f64::NAN; n];
        let mut res = vec![None; n];
        for i in p..n {
            if i == p {
                avg_g[i] = gains[1..=p].iter().sum::<f64>() / p as f64;
                avg_l[i] = losses[1..=p].iter().sum::<f64>() / p as f64;
            } else {
                avg_g[i] = (avg_g[i - 1] * (p as f64 - 1.0) + gains[i]) / p as f64;
                avg_l[i] = (avg_l[i - 1] * (p as f64 - 1.0) + losses[i]) / p as f64;
            }
            let rs = avg_g[i] / avg_l[i];
            res[i] = Some(100.0 - 100.0 / (1.0 + rs));
        }
        res
    }

    fn oracle_cci(h: &[f64], l: &[f64], c: &[f64], p: usize) -> Vec<Option<f64>> {
        let tp: Vec<f64> = (0..c.len()).map(|i| (h[i] + l[i] + c[i]) / 3.0).collect();
        (0..c.len())
            .map(|i| {
                if i + 1 < p {
                    return None;
                }
                let win = &tp[i + 1 - p..=i];
                let sma = win.iter().sum::<f64>() / p as f64;
                let md = win.iter().map(|x| (x - sma).abs()).sum::<f64>() / p as f64;
                Some((tp[i] - sma) / (0.015 * md))
            })
            .collect()
    }

    fn oracle_adx(h: &[f64], l: &[f64], c: &[f64], p: usize) -> Vec<Option<f64>> {
        let n = c.len();
        let mut res = vec![None; n];
        let mut tr = vec![0.0; n];
        let mut pdm = vec![0.0; n];
        let mut mdm = vec![0.0; n];
        for i in 1..n {
            let hl = h[i] - l[i];
            let hc = (h[i] - c[i - 1]).abs();
            let lc = (l[i] - c[i - 1]).abs();
            tr[i] = if hl >= hc && hl >= lc { hl } else if hc >= lc { hc } else { lc };
            let up = h[i] - h[i - 1];
            let dn = l[i - 1] - l[i];
            if up > dn && up > 0.0 {
                pdm[i] = up;
            }
            if dn > up && dn > 0.0 {
                mdm[i] = dn;
            }
        }
        let mut str_ = vec![0.0; n];
        let mut spdm = vec![0.0; n];
        let mut smdm = vec![0.0; n];
        let mut dx = vec![0.0; n];
        for i in p..n {
            if i == p {
                for j in 1..=p {
                    str_[i] += tr[j];
                    spdm[i] += pdm[j];
                    smdm[i] += mdm[j];
                }
            } else {
                str_[i] = str_[i - 1] - str_[i - 1] / p as f64 + tr[i];
                spdm[i] = spdm[i - 1] - spdm[i - 1] / p as f64 + pdm[i];
                smdm[i] = smdm[i - 1] - smdm[i - 1] / p as f64 + mdm[i];
            }
            let pdi = 100.0 * spdm[i] / str_[i];
            let mdi = 100.0 * smdm[i] / str_[i];
            dx[i] = 100.0 * (pdi - mdi).abs() / (pdi + mdi);
        }
        let mut prev = 0.0;
        for i in (2 * p - 1)..n {
            let v = if i == 2 * p - 1 {
                dx[p..=i].iter().sum::<f64>() / p as f64
            } else {
                (prev * (p as f64 - 1.0) + dx[i]) / p as f64
            };
            res[i] = Some(v);
            prev = v;
        }
        res
    }

    fn assert_close(got: &[Option<f64>], want: &[Option<f64>]) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            match (g, w) {
                (None, None) => {}
                (Some(g), Some(w)) => assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "index {i}: {g} vs {w}"),
                _ => panic!("definedness differs at {i}: {g:?} vs {w:?}"),
            }
        }
    }

    #[test]
    fn indicators_match_hand_oracle_on_reversal() {
        let (h, l, c) = reversal_series();
        assert_close(&rsi(&c, 14), &oracle_rsi(&c, 14));
        assert_close(&cci(&h, &l, &c, 20, 0.015), &oracle_cci(&h, &l, &c, 20));
        assert_close(&adx(&h, &l, &c, 14), &oracle_adx(&h, &l, &c, 14));
        // The reversal shows up: RSI falls below 50 by the end.
        assert!(rsi(&c, 14)[29].unwrap() < 50.0);
    }

    #[test]
    fn strictly_rising_closes_give_rsi_100() {
        let c: Vec<f64> = (0..40).map(|i| 50.0 + i as f64 * 0.7).collect();
        for v in rsi(&c, 14).into_iter().flatten() {
            assert_eq!(v, 100.0);
        }
    }

    #[test]
    fn constant_series_gives_zero_macd_and_cci() {
        let c = vec![37.3; 60];
        for v in macd_line(&c, 12, 26).into_iter().flatten() {
            assert_eq!(v, 0.0);
        }
        for v in cci(&c, &c, &c, 20, 0.015).into_iter().flatten() {
            assert_eq!(v, 0.0);
        }
        for v in adx(&c, &c, &c, 14).into_iter().flatten() {
            assert_eq!(v, 0.0);
        }
        assert_eq!(rsi(&c, 14)[20], Some(50.0));
    }

    #[test]
    fn default_warm_up_is_34_days() {
        let p = IndicatorParams::default();
        assert_eq!(p.first_valid_index(), 33);
        assert_eq!(p.required_history(), 34);
    }

    #[test]
    fn f32_indicators() {
        let c: Vec<f32> = (0..30).map(|i| 10.0 + (i as f32 * 0.3).sin()).collect();
        let r = rsi(&c, 14);
        assert!(r[29].unwrap() >= 0.0 && r[29].unwrap() <= 100.0);
    }

    #[test]
    fn ema_seed_is_simple_average() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let e = ema(&v, 3);
        assert_eq!(e[..2], [None, None]);
        assert_eq!(e[2], Some(2.0));
        assert_eq!(e[3], Some(2.0 + 0.5 * (4.0 - 2.0)));
    }
}
