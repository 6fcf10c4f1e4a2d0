//! Minute-bar OHLC series: loading, validation, windowing and synthetic fixtures.

use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of minute bars in one trading session.
pub const DEFAULT_BARS_PER_DAY: usize = 240;

const CSV_HEADER: [&str; 5] = ["timestamp", "open", "high", "low", "close"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid bar at timestamp {timestamp}: {message}")]
    InvalidBar { timestamp: i64, message: String },
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(i64),
    #[error("gap between timestamps {from} and {to}")]
    Gap { from: i64, to: i64 },
    #[error("empty series")]
    Empty,
    #[error("window out of range: t={t}, n={n}, len={len}")]
    OutOfRange { t: usize, n: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// One minute of OHLC prices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    /// Minutes since epoch.
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
}

impl Bar {
    pub fn new(timestamp: i64, open: f64, high: f64, low: f64, close: f64) -> Self {
        Self {
            timestamp,
            open,
            high,
            low,
            close,
        }
    }

    /// Checks the OHLC ordering and positivity invariants exactly.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |message: &str| DataError::InvalidBar {
            timestamp: self.timestamp,
            message: message.to_string(),
        };
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite price"));
        }
        if prices.iter().any(|&p| p <= 0.0) {
            return Err(bad("prices must be strictly positive"));
        }
        if self.high < self.low {
            return Err(bad("high < low"));
        }
        if self.open < self.low || self.open > self.high {
            return Err(bad("open outside [low, high]"));
        }
        if self.close < self.low || self.close > self.high {
            return Err(bad("close outside [low, high]"));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Bar {
        Bar::new(
            self.timestamp,
            self.open * c,
            self.high * c,
            self.low * c,
            self.close * c,
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Reject series whose consecutive timestamps differ by more than one minute.
    pub strict_gaps: bool,
}

/// A validated, time-ordered series of bars. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    instrument_id: String,
    bars: Vec<Bar>,
}

impl PriceSeries {
    /// Sorts by timestamp and validates every bar.
    pub fn new(instrument_id: impl Into<String>, mut bars: Vec<Bar>) -> Result<Self, DataError> {
        if bars.is_empty() {
            return Err(DataError::Empty);
        }
        bars.sort_by_key(|b| b.timestamp);
        for bar in &bars {
            bar.validate()?;
        }
        for pair in bars.windows(2) {
            if pair[0].timestamp == pair[1].timestamp {
                return Err(DataError::DuplicateTimestamp(pair[1].timestamp));
            }
        }
        Ok(Self {
            instrument_id: instrument_id.into(),
            bars,
        })
    }

    pub fn instrument_id(&self) -> &str {
        &self.instrument_id
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn bar(&self, index: usize) -> &Bar {
        &self.bars[index]
    }

    /// Bars at indices `[t - n, t)`.
    pub fn window(&self, t: usize, n: usize) -> Result<&[Bar], DataError> {
        if n == 0 || t < n || t > self.bars.len() {
            return Err(DataError::OutOfRange {
                t,
                n,
                len: self.bars.len(),
            });
        }
        Ok(&self.bars[t - n..t])
    }

    /// Sub-series of bars `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<PriceSeries, DataError> {
        if start >= end || end > self.bars.len() {
            return Err(DataError::OutOfRange {
                t: end,
                n: end.saturating_sub(start),
                len: self.bars.len(),
            });
        }
        Ok(PriceSeries {
            instrument_id: self.instrument_id.clone(),
            bars: self.bars[start..end].to_vec(),
        })
    }

    /// Splits into bars strictly before `timestamp` and bars at or after it.
    pub fn split_at_timestamp(
        &self,
        timestamp: i64,
    ) -> Result<(PriceSeries, PriceSeries), DataError> {
        let idx = self.bars.partition_point(|b| b.timestamp < timestamp);
        Ok((self.slice(0, idx)?, self.slice(idx, self.bars.len())?))
    }

    pub fn scaled(&self, c: f64) -> Result<PriceSeries, DataError> {
        PriceSeries::new(
            self.instrument_id.clone(),
            self.bars.iter().map(|b| b.scaled(c)).collect(),
        )
    }

    /// Number of complete trading days of `bars_per_day` bars.
    pub fn num_days(&self, bars_per_day: usize) -> usize {
        self.bars.len() / bars_per_day.max(1)
    }

    fn check_gaps(&self) -> Result<(), DataError> {
        for pair in self.bars.windows(2) {
            if pair[1].timestamp - pair[0].timestamp > 1 {
                return Err(DataError::Gap {
                    from: pair[0].timestamp,
                    to: pair[1].timestamp,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for PriceSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} bars)", self.instrument_id, self.bars.len())
    }
}

/// Loads a `timestamp,open,high,low,close` CSV file.
pub fn load_csv(path: impl AsRef<Path>, options: &LoadOptions) -> Result<PriceSeries, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let instrument_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, instrument_id, options)
}

pub fn read_csv(
    reader: impl io::Read,
    instrument_id: impl Into<String>,
    options: &LoadOptions,
) -> Result<PriceSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(DataError::Parse {
            line: 1,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }

    let mut bars = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != 5 {
            return Err(DataError::Parse {
                line,
                message: format!("expected 5 fields, found {}", record.len()),
            });
        }
        let timestamp: i64 = record[0].parse().map_err(|_| DataError::Parse {
            line,
            message: format!("bad timestamp {:?}", &record[0]),
        })?;
        let mut prices = [0.0; 4];
        for (k, p) in prices.iter_mut().enumerate() {
            *p = record[k + 1].parse().map_err(|_| DataError::Parse {
                line,
                message: format!("bad {} {:?}", CSV_HEADER[k + 1], &record[k + 1]),
            })?;
        }
        bars.push(Bar::new(
            timestamp, prices[0], prices[1], prices[2], prices[3],
        ));
    }

    let series = PriceSeries::new(instrument_id, bars)?;
    if options.strict_gaps {
        series.check_gaps()?;
    }
    Ok(series)
}

pub fn write_csv(series: &PriceSeries, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = io::BufWriter::new(File::create(path).map_err(io_err)?);
    write_csv_to(series, &mut file).map_err(io_err)?;
    file.flush().map_err(io_err)
}

pub fn write_csv_to(series: &PriceSeries, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for b in series.bars() {
        writeln!(
            out,
            "{},{},{},{},{}",
            b.timestamp, b.open, b.high, b.low, b.close
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    TrendUp,
    TrendDown,
    Sine,
    RandomWalk,
}

impl std::str::FromStr for SynthKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trend-up" => Ok(Self::TrendUp),
            "trend-down" => Ok(Self::TrendDown),
            "sine" => Ok(Self::Sine),
            "random-walk" => Ok(Self::RandomWalk),
            other => Err(DataError::InvalidParam(format!(
                "unknown series kind {other:?}"
            ))),
        }
    }
}

/// Settings for [`synth_series`]. All amounts are in index points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub base: f64,
    pub amplitude: f64,
    /// Sine period in bars.
    pub period: f64,
    /// Sine phase offset in bars.
    pub phase: f64,
    /// Per-bar drift. Trend kinds use its magnitude.
    pub drift: f64,
    /// Scale of the wick noise, and of the step noise for random walks.
    pub noise: f64,
    pub start_timestamp: i64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            base: 100.0,
            amplitude: 5.0,
            period: 40.0,
            phase: 0.0,
            drift: 0.0,
            noise: 0.0,
            start_timestamp: 0,
        }
    }
}

/// Deterministic synthetic series for fixtures.
///
/// Closes follow the chosen shape; `open_t = close_{t-1}` (the base price for
/// the first bar) and the wicks extend `|noise * z|` beyond the body.
pub fn synth_series(
    kind: SynthKind,
    length: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<PriceSeries, DataError> {
    if length == 0 {
        return Err(DataError::InvalidParam("length must be >= 1".into()));
    }
    if !(params.base > 0.0) || !params.base.is_finite() {
        return Err(DataError::InvalidParam(
            "base price must be positive".into(),
        ));
    }
    if kind == SynthKind::Sine {
        if !(params.period > 0.0) {
            return Err(DataError::InvalidParam(
                "sine period must be positive".into(),
            ));
        }
        if params.amplitude.abs() >= params.base {
            return Err(DataError::InvalidParam(
                "sine amplitude must be below the base price".into(),
            ));
        }
    }
    if kind == SynthKind::TrendDown && params.base - params.drift.abs() * length as f64 <= 0.0 {
        return Err(DataError::InvalidParam(
            "downward trend reaches a non-positive price".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bars = Vec::with_capacity(length);
    let mut prev_close = params.base;
    for t in 0..length {
        let close = match kind {
            SynthKind::TrendUp => params.base + params.drift.abs() * (t + 1) as f64,
            SynthKind::TrendDown => params.base - params.drift.abs() * (t + 1) as f64,
            SynthKind::Sine => {
                let angle = 2.0 * std::f64::consts::PI * (t as f64 + params.phase) / params.period;
                params.base + params.amplitude * angle.sin()
            }
            SynthKind::RandomWalk => {
                // Geometric steps keep prices positive.
                let z: f64 = StandardNormal.sample(&mut rng);
                prev_close * ((params.drift + params.noise * z) / params.base).exp()
            }
        };
        let open = prev_close;
        let wick = if params.noise > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            (params.noise * z).abs()
        } else {
            0.0
        };
        let high = open.max(close) + wick;
        let low = (open.min(close) - wick).max(open.min(close) * 0.5);
        bars.push(Bar::new(
            params.start_timestamp + t as i64,
            open,
            high,
            low,
            close,
        ));
        prev_close = close;
    }
    let label = match kind {
        SynthKind::TrendUp => "trend-up",
        SynthKind::TrendDown => "trend-down",
        SynthKind::Sine => "sine",
        SynthKind::RandomWalk => "random-walk",
    };
    PriceSeries::new(format!("synth-{label}-{seed}"), bars)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bar_csv() -> &'static str {
        "timestamp,open,high,low,close\n0,100,101,99,100.5\n1,100.5,102,100,101\n"
    }

    #[test]
    fn loads_two_bars() {
        let s = read_csv(two_bar_csv().as_bytes(), "x", &LoadOptions::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.bar(1), &Bar::new(1, 100.5, 102.0, 100.0, 101.0));
    }

    #[test]
    fn header_only_is_empty_error() {
        let err = read_csv(
            "timestamp,open,high,low,close\n".as_bytes(),
            "x",
            &LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::Empty));
        assert_eq!(err.to_string(), "empty series");
    }

    #[test]
    fn high_below_low_names_bar() {
        let csv = "timestamp,open,high,low,close\n0,100,101,99,100\n7,100,98,99,100\n";
        let err = read_csv(csv.as_bytes(), "x", &LoadOptions::default()).unwrap_err();
        match err {
            DataError::InvalidBar { timestamp, .. } => assert_eq!(timestamp, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_names_line() {
        let csv = "timestamp,open,high,low,close\n0,100,101,99,100\n1,abc,101,99,100\n";
        let err = read_csv(csv.as_bytes(), "x", &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let csv = "timestamp,open,high,low,close\n0,100,101,99,100\n0,100,101,99,100\n";
        let err = read_csv(csv.as_bytes(), "x", &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::DuplicateTimestamp(0)));
    }

    #[test]
    fn rows_sorted_by_timestamp() {
        let csv = "timestamp,open,high,low,close\n5,100,101,99,100\n2,100,101,99,100.5\n";
        let s = read_csv(csv.as_bytes(), "x", &LoadOptions::default()).unwrap();
        assert_eq!(s.bar(0).timestamp, 2);
    }

    #[test]
    fn gaps_only_rejected_when_strict() {
        let csv = "timestamp,open,high,low,close\n0,100,101,99,100\n3,100,101,99,100\n";
        assert!(read_csv(csv.as_bytes(), "x", &LoadOptions::default()).is_ok());
        let err = read_csv(csv.as_bytes(), "x", &LoadOptions { strict_gaps: true }).unwrap_err();
        assert!(matches!(err, DataError::Gap { from: 0, to: 3 }));
    }

    #[test]
    fn window_slice_semantics() {
        let s = synth_series(
            SynthKind::TrendUp,
            5,
            0,
            &SynthParams {
                drift: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        let w = s.window(3, 3).unwrap();
        assert_eq!(
            w.iter().map(|b| b.timestamp).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert!(s.window(2, 3).is_err());
        assert!(s.window(6, 1).is_err());
        assert_eq!(s.window(5, 1).unwrap()[0].timestamp, 4);
    }

    #[test]
    fn flat_sine_is_constant() {
        let p = SynthParams {
            amplitude: 0.0,
            ..Default::default()
        };
        let s = synth_series(SynthKind::Sine, 4, 1, &p).unwrap();
        for b in s.bars() {
            assert_eq!([b.open, b.high, b.low, b.close], [100.0; 4]);
        }
    }

    #[test]
    fn trend_up_closes() {
        let p = SynthParams {
            drift: 1.0,
            ..Default::default()
        };
        let s = synth_series(SynthKind::TrendUp, 3, 0, &p).unwrap();
        let closes: Vec<f64> = s.bars().iter().map(|b| b.close).collect();
        assert_eq!(closes, vec![101.0, 102.0, 103.0]);
    }

    #[test]
    fn synth_is_deterministic() {
        let p = SynthParams {
            noise: 0.3,
            drift: 0.01,
            ..Default::default()
        };
        let a = synth_series(SynthKind::RandomWalk, 500, 42, &p).unwrap();
        let b = synth_series(SynthKind::RandomWalk, 500, 42, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_positive_base() {
        let p = SynthParams {
            base: 0.0,
            ..Default::default()
        };
        assert!(synth_series(SynthKind::Sine, 4, 0, &p).is_err());
    }
}
