//! Price ingestion and lagged return features.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-positive or invalid price at row {row}")]
    NonPositivePrice { row: usize },
    #[error("unparseable timestamp `{value}` at row {row}")]
    BadTimestamp { row: usize, value: String },
    #[error("timestamps cannot be ordered: duplicate timestamp {timestamp}")]
    UnsortableTimestamps { timestamp: i64 },
    #[error("series `{0}` is empty")]
    EmptySeries(String),
    #[error("no series to align")]
    NoSeries,
    #[error("aligned grid is empty")]
    EmptyIntersection,
    #[error("time index {t} has less history than the largest lag {max_lag}")]
    InsufficientHistory { t: usize, max_lag: usize },
    #[error("panel of length {len} is too short for test={test_bars}, gap={gap_bars}, max_lag={max_lag}")]
    PanelTooShort {
        len: usize,
        test_bars: usize,
        gap_bars: usize,
        max_lag: usize,
    },
    #[error("invalid lag specification: {0}")]
    BadLags(String),
    #[error("invalid panel cache: {0}")]
    BadCache(String),
}

/// Close prices of one asset, sorted by timestamp (epoch seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub asset_id: String,
    pub timestamps: Vec<i64>,
    pub close: Vec<f64>,
}

impl PriceSeries {
    /// Builds a series sorted by timestamp. Prices must be positive.
    pub fn new(asset_id: impl Into<String>, rows: Vec<(i64, f64)>) -> Result<Self, DataError> {
        let mut indexed: Vec<(usize, i64, f64)> =
            rows.into_iter().enumerate().map(|(i, (t, c))| (i, t, c)).collect();
        if let Some((row, _, _)) = indexed.iter().find(|(_, _, c)| !(c.is_finite() && *c > 0.0)) {
            return Err(DataError::NonPositivePrice { row: *row });
        }
        indexed.sort_by_key(|(_, t, _)| *t);
        if let Some(w) = indexed.windows(2).find(|w| w[0].1 == w[1].1) {
            return Err(DataError::UnsortableTimestamps { timestamp: w[0].1 });
        }
        Ok(Self {
            asset_id: asset_id.into(),
            timestamps: indexed.iter().map(|r| r.1).collect(),
            close: indexed.iter().map(|r| r.2).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.close.len()
    }

    pub fn is_empty(&self) -> bool {
        self.close.is_empty()
    }
}

/// Column names used by [`load_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub close: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            close: "close".into(),
        }
    }
}

/// Loads a price file. The asset id is the file stem.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PriceSeries, DataError> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_csv_reader(File::open(path)?, id, schema)
}

pub fn load_csv_reader<R: Read>(
    reader: R,
    asset_id: impl Into<String>,
    schema: &CsvSchema,
) -> Result<PriceSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let ts_col = col(&schema.timestamp)?;
    let close_col = col(&schema.close)?;
    let mut rows = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let raw_ts = rec.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(raw_ts).ok_or_else(|| DataError::BadTimestamp {
            row,
            value: raw_ts.to_string(),
        })?;
        let close: f64 = rec
            .get(close_col)
            .and_then(|c| c.parse().ok())
            .ok_or(DataError::NonPositivePrice { row })?;
        rows.push((ts, close));
    }
    PriceSeries::new(asset_id, rows)
}

/// Epoch seconds or ISO-8601 (with offset, or naive UTC).
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    if let Ok(secs) = raw.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(|dt| dt.and_utc().timestamp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Intersect,
    #[default]
    ForwardFill,
}

/// Several assets on one common clock. `closes` is row-major `[time x asset]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPanel {
    pub assets: Vec<String>,
    pub grid: Vec<i64>,
    closes: Vec<f64>,
}

impl AlignedPanel {
    pub fn new(assets: Vec<String>, grid: Vec<i64>, closes: Vec<f64>) -> Result<Self, DataError> {
        if closes.len() != assets.len() * grid.len() {
            return Err(DataError::BadCache(format!(
                "{} closes for {} assets x {} bars",
                closes.len(),
                assets.len(),
                grid.len()
            )));
        }
        if let Some(row) = closes.iter().position(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(DataError::NonPositivePrice { row: row / assets.len().max(1) });
        }
        Ok(Self { assets, grid, closes })
    }

    /// Single-asset panel on a unit-spaced clock.
    pub fn from_prices(asset: impl Into<String>, prices: &[f64]) -> Result<Self, DataError> {
        Self::new(vec![asset.into()], (0..prices.len() as i64).collect(), prices.to_vec())
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    #[inline]
    pub fn close(&self, t: usize, asset: usize) -> f64 {
        self.closes[t * self.assets.len() + asset]
    }

    /// Prices of all assets at bar `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.assets.len();
        &self.closes[t * n..(t + 1) * n]
    }

    pub fn closes(&self) -> &[f64] {
        &self.closes
    }

    pub fn to_series(&self) -> Vec<PriceSeries> {
        (0..self.n_assets())
            .map(|a| PriceSeries {
                asset_id: self.assets[a].clone(),
                timestamps: self.grid.clone(),
                close: (0..self.len()).map(|t| self.close(t, a)).collect(),
            })
            .collect()
    }
}

/// Bookkeeping produced by [`align_with_stats`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignStats {
    pub rows_read: Vec<usize>,
    pub rows_dropped: Vec<usize>,
    pub filled: Vec<usize>,
    pub grid_len: usize,
}

pub fn align(series: &[PriceSeries], mode: AlignMode) -> Result<AlignedPanel, DataError> {
    align_with_stats(series, mode).map(|(p, _)| p)
}

pub fn align_with_stats(
    series: &[PriceSeries],
    mode: AlignMode,
) -> Result<(AlignedPanel, AlignStats), DataError> {
    if series.is_empty() {
        return Err(DataError::NoSeries);
    }
    if let Some(s) = series.iter().find(|s| s.is_empty()) {
        return Err(DataError::EmptySeries(s.asset_id.clone()));
    }
    let grid: Vec<i64> = match mode {
        AlignMode::Intersect => {
            let mut grid = series[0].timestamps.clone();
            for s in &series[1..] {
                grid.retain(|t| s.timestamps.binary_search(t).is_ok());
            }
            grid
        }
        AlignMode::ForwardFill => {
            let start = series.iter().map(|s| s.timestamps[0]).max().unwrap_or(0);
            let mut grid: Vec<i64> = series
                .iter()
                .flat_map(|s| s.timestamps.iter().copied())
                .filter(|t| *t >= start)
                .collect();
            grid.sort_unstable();
            grid.dedup();
            grid
        }
    };
    if grid.is_empty() {
        return Err(DataError::EmptyIntersection);
    }

    let n = series.len();
    let mut closes = vec![0.0; grid.len() * n];
    let mut stats = AlignStats {
        rows_read: series.iter().map(|s| s.len()).collect(),
        rows_dropped: vec![0; n],
        filled: vec![0; n],
        grid_len: grid.len(),
    };
    for (a, s) in series.iter().enumerate() {
        // walk both sorted sequences once
        let mut k = 0;
        let mut used = 0;
        for (t, ts) in grid.iter().enumerate() {
            while k + 1 < s.len() && s.timestamps[k + 1] <= *ts {
                k += 1;
            }
            if s.timestamps[k] == *ts {
                used += 1;
            } else {
                stats.filled[a] += 1;
            }
            closes[t * n + a] = s.close[k];
        }
        stats.rows_dropped[a] = s.len() - used;
    }
    let assets = series.iter().map(|s| s.asset_id.clone()).collect();
    Ok((AlignedPanel { assets, grid, closes }, stats))
}

/// Strictly increasing lags in bars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LagSpec {
    lags: Vec<usize>,
}

impl LagSpec {
    /// Intraday lags used by default; day-equivalent lags are appended by [`LagSpec::with_day_lags`].
    pub const DEFAULT_BAR_LAGS: [usize; 12] = [1, 2, 20, 30, 45, 60, 90, 120, 180, 240, 360, 720];
    pub const DEFAULT_DAY_LAGS: [f64; 6] = [1.0, 1.5, 2.0, 3.0, 5.0, 7.0];

    pub fn new(lags: Vec<usize>) -> Result<Self, DataError> {
        if lags.is_empty() {
            return Err(DataError::BadLags("no lags".into()));
        }
        if lags[0] < 1 {
            return Err(DataError::BadLags("lags must be >= 1".into()));
        }
        if lags.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::BadLags(format!("not strictly increasing: {lags:?}")));
        }
        Ok(Self { lags })
    }

    /// Bar lags plus day-equivalent lags converted with `bars_per_day`.
    pub fn with_day_lags(bar_lags: &[usize], day_lags: &[f64], bars_per_day: usize) -> Result<Self, DataError> {
        let mut lags: Vec<usize> = bar_lags.to_vec();
        lags.extend(day_lags.iter().map(|d| (d * bars_per_day as f64).round() as usize));
        lags.sort_unstable();
        lags.dedup();
        Self::new(lags)
    }

    pub fn default_for(bars_per_day: usize) -> Self {
        Self::with_day_lags(&Self::DEFAULT_BAR_LAGS, &Self::DEFAULT_DAY_LAGS, bars_per_day)
            .expect("default lags are valid")
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn max_lag(&self) -> usize {
        *self.lags.last().expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    /// Feature vector length for `n_assets`.
    pub fn feature_dim(&self, n_assets: usize) -> usize {
        2 * self.lags.len() * n_assets
    }
}

impl TryFrom<Vec<usize>> for LagSpec {
    type Error = DataError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LagSpec> for Vec<usize> {
    fn from(l: LagSpec) -> Self {
        l.lags
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOptions {
    /// Divide the moving-average sum of `l + 1` prices by `l` instead of `l + 1`.
    pub divide_by_lag: bool,
}

impl FeatureOptions {
    #[inline]
    fn m_divisor(&self, lag: usize) -> f64 {
        if self.divide_by_lag {
            lag as f64
        } else {
            (lag + 1) as f64
        }
    }
}

/// Features at bar `t`: for each asset and lag `l`,
/// `[z_t / z_{t-l} - 1, z_t / m_{t,l} - 1]` with `m_{t,l}` the average of `z_{t-l..=t}`.
pub fn feature_row(
    panel: &AlignedPanel,
    t: usize,
    lags: &LagSpec,
    opts: FeatureOptions,
) -> Result<Vec<f64>, DataError> {
    let max_lag = lags.max_lag();
    if t < max_lag || t >= panel.len() {
        return Err(DataError::InsufficientHistory { t, max_lag });
    }
    let mut out = Vec::with_capacity(lags.feature_dim(panel.n_assets()));
    for a in 0..panel.n_assets() {
        let z = panel.close(t, a);
        for &l in lags.lags() {
            let sum: f64 = (0..=l).map(|i| panel.close(t - i, a)).sum();
            let m = sum / opts.m_divisor(l);
            out.push(z / panel.close(t - l, a) - 1.0);
            out.push(z / m - 1.0);
        }
    }
    Ok(out)
}

/// Feature rows precomputed for every bar in `[max_lag, len)` using prefix sums.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    first: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl FeatureMatrix {
    pub fn build(panel: &AlignedPanel, lags: &LagSpec, opts: FeatureOptions) -> Result<Self, DataError> {
        let first = lags.max_lag();
        if panel.len() <= first {
            return Err(DataError::InsufficientHistory {
                t: panel.len().saturating_sub(1),
                max_lag: first,
            });
        }
        let n_assets = panel.n_assets();
        let dim = lags.feature_dim(n_assets);
        // prefix[a][t] = sum of closes before t
        let prefix: Vec<Vec<f64>> = (0..n_assets)
            .map(|a| {
                let mut acc = 0.0;
                let mut v = Vec::with_capacity(panel.len() + 1);
                v.push(0.0);
                for t in 0..panel.len() {
                    acc += panel.close(t, a);
                    v.push(acc);
                }
                v
            })
            .collect();
        let n_rows = panel.len() - first;
        let mut rows = vec![0.0; n_rows * dim];
        rows.par_chunks_mut(dim).enumerate().for_each(|(k, row)| {
            let t = first + k;
            let mut i = 0;
            for (a, pre) in prefix.iter().enumerate() {
                let z = panel.close(t, a);
                for &l in lags.lags() {
                    let m = (pre[t + 1] - pre[t - l]) / opts.m_divisor(l);
                    row[i] = z / panel.close(t - l, a) - 1.0;
                    row[i + 1] = z / m - 1.0;
                    i += 2;
                }
            }
        });
        Ok(Self { first, dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// First bar with a full lag history.
    pub fn first(&self) -> usize {
        self.first
    }

    pub fn end(&self) -> usize {
        self.first + self.rows.len() / self.dim.max(1)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let k = t - self.first;
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    /// Z-scores every column with the mean and std of the rows in `fit`.
    pub fn standardize(&mut self, fit: Range<usize>) {
        let fit = fit.start.max(self.first)..fit.end.min(self.end());
        let n = fit.len().max(1) as f64;
        for c in 0..self.dim {
            let col = |t: usize| self.rows[(t - self.first) * self.dim + c];
            let mean = fit.clone().map(col).sum::<f64>() / n;
            let var = fit.clone().map(|t| (col(t) - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for k in 0..self.rows.len() / self.dim {
                let v = &mut self.rows[k * self.dim + c];
                *v = (*v - mean) / sd;
            }
        }
    }
}

/// Features plus per-task worth at bar `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub t: usize,
    pub features: Vec<f64>,
    pub worth_snapshot: Vec<f64>,
}

/// Splits `[0, len)` into a train range and a test range separated by `gap_bars`.
pub fn split(
    len: usize,
    test_bars: usize,
    gap_bars: usize,
    max_lag: usize,
) -> Result<(Range<usize>, Range<usize>), DataError> {
    if len <= test_bars + gap_bars + max_lag {
        return Err(DataError::PanelTooShort {
            len,
            test_bars,
            gap_bars,
            max_lag,
        });
    }
    let test_start = len - test_bars;
    Ok((0..test_start - gap_bars, test_start..len))
}

const PANEL_MAGIC: &[u8; 16] = b"CDGPANEL\0\0\0\0\0\0\0\0";
pub const PANEL_CACHE_VERSION: u32 = 1;

/// Writes the panel as: 16-byte magic, version u32, n_bars u64, n_assets u64,
/// asset ids (u32 length + utf-8), timestamps i64, closes f64; little endian.
pub fn write_panel_cache(panel: &AlignedPanel, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PANEL_MAGIC)?;
    w.write_all(&PANEL_CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(panel.len() as u64).to_le_bytes())?;
    w.write_all(&(panel.n_assets() as u64).to_le_bytes())?;
    for a in &panel.assets {
        w.write_all(&(a.len() as u32).to_le_bytes())?;
        w.write_all(a.as_bytes())?;
    }
    for t in &panel.grid {
        w.write_all(&t.to_le_bytes())?;
    }
    for c in &panel.closes {
        w.write_all(&c.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_panel_cache(path: impl AsRef<Path>) -> Result<AlignedPanel, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic)?;
    if &magic != PANEL_MAGIC {
        return Err(DataError::BadCache("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != PANEL_CACHE_VERSION {
        return Err(DataError::BadCache(format!("unsupported version {version}")));
    }
    let n_bars = read_u64(&mut r)? as usize;
    let n_assets = read_u64(&mut r)? as usize;
    let mut assets = Vec::with_capacity(n_assets);
    for _ in 0..n_assets {
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        assets.push(String::from_utf8(buf).map_err(|e| DataError::BadCache(e.to_string()))?);
    }
    let mut grid = Vec::with_capacity(n_bars);
    for _ in 0..n_bars {
        grid.push(read_u64(&mut r)? as i64);
    }
    let mut closes = Vec::with_capacity(n_bars * n_assets);
    for _ in 0..n_bars * n_assets {
        closes.push(f64::from_bits(read_u64(&mut r)?));
    }
    AlignedPanel::new(assets, grid, closes)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(id: &str, ts: &[i64], c: &[f64]) -> PriceSeries {
        PriceSeries::new(id, ts.iter().copied().zip(c.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn csv_loading() {
        let ok = "timestamp,close\n0,10\n60,10.1\n";
        let s = load_csv_reader(ok.as_bytes(), "x", &CsvSchema::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.close, vec![10.0, 10.1]);

        let neg = "timestamp,close\n0,10\n60,-1\n";
        assert!(matches!(
            load_csv_reader(neg.as_bytes(), "x", &CsvSchema::default()),
            Err(DataError::NonPositivePrice { row: 1 })
        ));
        let dup = "timestamp,close\n0,10\n60,10\n60,11\n";
        assert!(matches!(
            load_csv_reader(dup.as_bytes(), "x", &CsvSchema::default()),
            Err(DataError::UnsortableTimestamps { timestamp: 60 })
        ));
        assert!(matches!(
            load_csv_reader("".as_bytes(), "x", &CsvSchema::default()),
            Err(DataError::MissingColumn(_))
        ));
        let unsorted = "close,time\n2,120\n1,0\n";
        let schema = CsvSchema {
            timestamp: "time".into(),
            close: "close".into(),
        };
        let s = load_csv_reader(unsorted.as_bytes(), "x", &schema).unwrap();
        assert_eq!(s.timestamps, vec![0, 120]);
        assert_eq!(s.close, vec![1.0, 2.0]);
    }

    #[test]
    fn iso_timestamps() {
        assert_eq!(parse_timestamp("60"), Some(60));
        assert_eq!(parse_timestamp("1970-01-01T00:01:00Z"), Some(60));
        assert_eq!(parse_timestamp("1970-01-01 00:02:00"), Some(120));
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn alignment_modes() {
        let a = series("a", &[0, 60, 120], &[1.0, 2.0, 3.0]);
        let b = series("b", &[60, 120, 180], &[5.0, 6.0, 7.0]);
        let p = align(&[a.clone(), b.clone()], AlignMode::Intersect).unwrap();
        assert_eq!(p.grid, vec![60, 120]);
        assert_eq!(p.row(0), &[2.0, 5.0]);

        let (p, stats) = align_with_stats(&[a.clone(), b.clone()], AlignMode::ForwardFill).unwrap();
        assert_eq!(p.grid, vec![60, 120, 180]);
        assert_eq!(p.row(2), &[3.0, 7.0]);
        assert_eq!(stats.filled, vec![1, 0]);
        assert_eq!(stats.rows_dropped, vec![1, 0]);

        let same = align(&[a.clone(), a.clone()], AlignMode::Intersect).unwrap();
        assert_eq!(same.grid, a.timestamps);

        let c = series("c", &[0, 60], &[1.0, 1.0]);
        let d = series("d", &[120, 180], &[1.0, 1.0]);
        assert!(matches!(
            align(&[c, d], AlignMode::Intersect),
            Err(DataError::EmptyIntersection)
        ));
        assert!(matches!(align(&[], AlignMode::Intersect), Err(DataError::NoSeries)));
    }

    #[test]
    fn feature_examples() {
        let lags = LagSpec::new(vec![1]).unwrap();
        let flat = AlignedPanel::from_prices("x", &[5.0; 4]).unwrap();
        assert!(feature_row(&flat, 3, &lags, FeatureOptions::default())
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));

        let p = AlignedPanel::from_prices("x", &[100.0, 101.0]).unwrap();
        let f = feature_row(&p, 1, &lags, FeatureOptions::default()).unwrap();
        assert!((f[0] - 0.01).abs() < 1e-15);

        let p = AlignedPanel::from_prices("x", &[100.0, 102.0, 104.0]).unwrap();
        let lag2 = LagSpec::new(vec![2]).unwrap();
        let f = feature_row(&p, 2, &lag2, FeatureOptions::default()).unwrap();
        assert!((f[0] - 0.04).abs() < 1e-15);
        assert!((f[1] - (104.0 / 102.0 - 1.0)).abs() < 1e-15);
        assert!((f[1] - 0.019608).abs() < 1e-6);
        // divisor l: m = 306 / 2
        let exact = feature_row(&p, 2, &lag2, FeatureOptions { divide_by_lag: true }).unwrap();
        assert!((exact[1] - (104.0 / 153.0 - 1.0)).abs() < 1e-15);

        assert!(matches!(
            feature_row(&p, 1, &lag2, FeatureOptions::default()),
            Err(DataError::InsufficientHistory { t: 1, max_lag: 2 })
        ));
    }

    #[test]
    fn lag_specs() {
        assert!(LagSpec::new(vec![2, 2]).is_err());
        assert!(LagSpec::new(vec![0, 1]).is_err());
        let d = LagSpec::default_for(1440);
        assert_eq!(d.len(), 18);
        assert_eq!(&d.lags()[12..], &[1440, 2160, 2880, 4320, 7200, 10080]);
        let eq = LagSpec::default_for(390);
        assert_eq!(&eq.lags()[10..], &[360, 390, 585, 720, 780, 1170, 1950, 2730]);
        assert_eq!(d.feature_dim(3), 108);
    }

    #[test]
    fn split_examples() {
        assert_eq!(split(1000, 100, 50, 10).unwrap(), (0..850, 900..1000));
        assert_eq!(split(200, 50, 0, 10).unwrap(), (0..150, 150..200));
        assert!(matches!(split(100, 100, 50, 1), Err(DataError::PanelTooShort { .. })));
    }

    #[test]
    fn feature_matrix_matches_direct_rows() {
        let prices: Vec<f64> = (0..400).map(|i| 100.0 + (i as f64 * 0.37).sin() * 3.0 + i as f64 * 0.01).collect();
        let other: Vec<f64> = prices.iter().map(|p| 2.0 * p + 1.0).collect();
        let closes = prices.iter().zip(&other).flat_map(|(a, b)| [*a, *b]).collect();
        let panel = AlignedPanel::new(vec!["a".into(), "b".into()], (0..400).collect(), closes).unwrap();
        let lags = LagSpec::new(vec![1, 5, 30, 120]).unwrap();
        for opts in [FeatureOptions::default(), FeatureOptions { divide_by_lag: true }] {
            let fm = FeatureMatrix::build(&panel, &lags, opts).unwrap();
            assert_eq!(fm.first(), 120);
            assert_eq!(fm.end(), 400);
            for t in [120, 200, 399] {
                let direct = feature_row(&panel, t, &lags, opts).unwrap();
                for (a, b) in direct.iter().zip(fm.row(t)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn panel_cache_roundtrip() {
        let a = series("btc", &[0, 60, 120], &[1.5, 2.0, 3.25]);
        let b = series("eth", &[0, 60, 120], &[5.0, 6.0, 7.0]);
        let p = align(&[a, b], AlignMode::Intersect).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.bin");
        write_panel_cache(&p, &path).unwrap();
        assert_eq!(read_panel_cache(&path).unwrap(), p);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_panel_cache(&path).is_err());
    }

    proptest! {
        #[test]
        fn no_lookahead(prices in prop::collection::vec(1.0f64..100.0, 40), bump in prop::collection::vec(1.0f64..100.0, 10)) {
            let lags = LagSpec::new(vec![1, 3, 7]).unwrap();
            let p = AlignedPanel::from_prices("x", &prices).unwrap();
            let mut changed = prices.clone();
            changed[30..].copy_from_slice(&bump);
            let q = AlignedPanel::from_prices("x", &changed).unwrap();
            let a = feature_row(&p, 29, &lags, FeatureOptions::default()).unwrap();
            let b = feature_row(&q, 29, &lags, FeatureOptions::default()).unwrap();
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn align_idempotent(ts in prop::collection::btree_set(0i64..10_000, 1..50)) {
            let rows: Vec<(i64, f64)> = ts.iter().map(|t| (*t, 1.0 + *t as f64)).collect();
            let s = PriceSeries::new("x", rows).unwrap();
            for mode in [AlignMode::Intersect, AlignMode::ForwardFill] {
                let once = align(std::slice::from_ref(&s), mode).unwrap();
                let twice = align(&once.to_series(), mode).unwrap();
                prop_assert_eq!(&once, &twice);
            }
        }
    }
}
