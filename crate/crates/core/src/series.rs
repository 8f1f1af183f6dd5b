//! Weather time-series ingestion, validation, statistics and prompt rendering.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of table rows rendered into a prompt.
pub const DEFAULT_MAX_ROWS: usize = 48;

const ANOMALY_SIGMAS: f64 = 3.0;
const TREND_SIGMA_FRACTION: f64 = 0.5;
const DIURNAL_LAG: usize = 24;
const DIURNAL_MIN_LEN: usize = 48;
const PERIODIC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    #[serde(rename = "temperature_c")]
    Temperature,
    #[serde(rename = "pressure_hpa")]
    Pressure,
    #[serde(rename = "humidity_pct")]
    Humidity,
    #[serde(rename = "wind_speed_ms")]
    WindSpeed,
    #[serde(rename = "precipitation_mm")]
    Precipitation,
}

impl VariableKind {
    pub const ALL: [VariableKind; 5] = [
        VariableKind::Temperature,
        VariableKind::Pressure,
        VariableKind::Humidity,
        VariableKind::WindSpeed,
        VariableKind::Precipitation,
    ];

    /// Column name used in CSV/JSON input and in rendered tables.
    pub fn column(self) -> &'static str {
        match self {
            VariableKind::Temperature => "temperature_c",
            VariableKind::Pressure => "pressure_hpa",
            VariableKind::Humidity => "humidity_pct",
            VariableKind::WindSpeed => "wind_speed_ms",
            VariableKind::Precipitation => "precipitation_mm",
        }
    }

    pub fn from_column(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.column() == name)
    }

    fn in_bounds(self, value: f64) -> bool {
        match self {
            VariableKind::Temperature => value > -90.0 && value < 60.0,
            VariableKind::Pressure => value > 800.0 && value < 1100.0,
            VariableKind::Humidity => (0.0..=100.0).contains(&value),
            VariableKind::WindSpeed | VariableKind::Precipitation => value >= 0.0,
        }
    }

    fn bounds_text(self) -> &'static str {
        match self {
            VariableKind::Temperature => "(-90, 60) C",
            VariableKind::Pressure => "(800, 1100) hPa",
            VariableKind::Humidity => "[0, 100] %",
            VariableKind::WindSpeed => ">= 0 m/s",
            VariableKind::Precipitation => ">= 0 mm",
        }
    }
}

impl fmt::Display for VariableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub timestamp: DateTime<Utc>,
    pub temperature_c: Option<f64>,
    pub pressure_hpa: Option<f64>,
    pub humidity_pct: Option<f64>,
    pub wind_speed_ms: Option<f64>,
    pub precipitation_mm: Option<f64>,
}

impl Observation {
    pub fn empty(timestamp: DateTime<Utc>) -> Self {
        Self {
            timestamp,
            temperature_c: None,
            pressure_hpa: None,
            humidity_pct: None,
            wind_speed_ms: None,
            precipitation_mm: None,
        }
    }

    pub fn get(&self, kind: VariableKind) -> Option<f64> {
        match kind {
            VariableKind::Temperature => self.temperature_c,
            VariableKind::Pressure => self.pressure_hpa,
            VariableKind::Humidity => self.humidity_pct,
            VariableKind::WindSpeed => self.wind_speed_ms,
            VariableKind::Precipitation => self.precipitation_mm,
        }
    }

    pub fn set(&mut self, kind: VariableKind, value: Option<f64>) {
        let slot = match kind {
            VariableKind::Temperature => &mut self.temperature_c,
            VariableKind::Pressure => &mut self.pressure_hpa,
            VariableKind::Humidity => &mut self.humidity_pct,
            VariableKind::WindSpeed => &mut self.wind_speed_ms,
            VariableKind::Precipitation => &mut self.precipitation_mm,
        };
        *slot = value;
    }

    fn has_any(&self) -> bool {
        VariableKind::ALL.iter().any(|&k| self.get(k).is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherSeries {
    pub station_id: String,
    pub observations: Vec<Observation>,
    pub variables_present: BTreeSet<VariableKind>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeriesError {
    #[error("malformed input at row {row}, column `{column}`: {detail}")]
    MalformedInput { row: usize, column: String, detail: String },
    #[error("row {row}: {variable} = {value} outside physical bounds {bounds}")]
    RangeViolation {
        row: usize,
        variable: VariableKind,
        value: f64,
        bounds: &'static str,
    },
    #[error("row {row}: timestamp {timestamp} is not strictly after the previous row")]
    UnsortedTimestamps { row: usize, timestamp: String },
    #[error("series has {len} observations, need at least 2")]
    TooShort { len: usize },
    #[error("row {row}: missing {variable} and gaps are not allowed")]
    GapNotAllowed { row: usize, variable: VariableKind },
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Json,
}

impl InputFormat {
    /// Guess the format from a file extension; anything not `.json` is CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => InputFormat::Json,
            _ => InputFormat::Csv,
        }
    }
}

/// Raw, unvalidated row: (1-based row number, timestamp text, per-variable cells).
struct RawRow {
    row: usize,
    timestamp: String,
    values: Vec<(VariableKind, Option<f64>)>,
}

/// Parse and validate a series. `station_id` is carried through opaquely.
pub fn parse_series(
    bytes: &[u8],
    format: InputFormat,
    allow_gaps: bool,
    station_id: impl Into<String>,
) -> Result<WeatherSeries, SeriesError> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(SeriesError::Empty);
    }
    let rows = match format {
        InputFormat::Csv => read_csv(bytes)?,
        InputFormat::Json => read_json(bytes)?,
    };
    build_series(rows, allow_gaps, station_id.into())
}

fn read_csv(bytes: &[u8]) -> Result<Vec<RawRow>, SeriesError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| malformed(1, "header", e.to_string()))?
        .clone();

    let mut ts_col = None;
    let mut var_cols = Vec::new();
    for (i, name) in headers.iter().enumerate() {
        if name == "timestamp" {
            ts_col = Some(i);
        } else if let Some(kind) = VariableKind::from_column(name) {
            var_cols.push((i, kind));
        } else {
            return Err(malformed(1, name, "unknown column"));
        }
    }
    let ts_col = ts_col.ok_or_else(|| malformed(1, "timestamp", "missing timestamp column"))?;

    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        // header is row 1
        let row = idx + 2;
        let record = record.map_err(|e| malformed(row, "*", e.to_string()))?;
        let timestamp = record.get(ts_col).unwrap_or_default().to_string();
        let mut values = Vec::with_capacity(var_cols.len());
        for &(col, kind) in &var_cols {
            let cell = record.get(col).unwrap_or_default();
            let value = if cell.is_empty() {
                None
            } else {
                Some(
                    parse_number(cell)
                        .ok_or_else(|| malformed(row, kind.column(), format!("not a finite number: `{cell}`")))?,
                )
            };
            values.push((kind, value));
        }
        rows.push(RawRow { row, timestamp, values });
    }
    Ok(rows)
}

fn read_json(bytes: &[u8]) -> Result<Vec<RawRow>, SeriesError> {
    let doc: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| malformed(e.line(), "*", e.to_string()))?;
    let items = doc
        .as_array()
        .ok_or_else(|| malformed(0, "*", "expected a JSON array of objects"))?;
    let mut rows = Vec::with_capacity(items.len());
    for (idx, item) in items.iter().enumerate() {
        let row = idx + 1;
        let obj = item
            .as_object()
            .ok_or_else(|| malformed(row, "*", "expected an object"))?;
        let mut timestamp = None;
        let mut values = Vec::new();
        for (key, value) in obj {
            if key == "timestamp" {
                timestamp = Some(
                    value
                        .as_str()
                        .ok_or_else(|| malformed(row, "timestamp", "expected a string"))?
                        .to_string(),
                );
                continue;
            }
            let kind = VariableKind::from_column(key).ok_or_else(|| malformed(row, key, "unknown field"))?;
            let parsed = match value {
                serde_json::Value::Null => None,
                serde_json::Value::Number(n) => Some(
                    n.as_f64()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| malformed(row, key, "not a finite number"))?,
                ),
                serde_json::Value::String(s) if s.trim().is_empty() => None,
                _ => return Err(malformed(row, key, "expected a number or null")),
            };
            values.push((kind, parsed));
        }
        let timestamp = timestamp.ok_or_else(|| malformed(row, "timestamp", "missing"))?;
        rows.push(RawRow { row, timestamp, values });
    }
    Ok(rows)
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn malformed(row: usize, column: &str, detail: impl Into<String>) -> SeriesError {
    SeriesError::MalformedInput {
        row,
        column: column.to_string(),
        detail: detail.into(),
    }
}

fn build_series(rows: Vec<RawRow>, allow_gaps: bool, station_id: String) -> Result<WeatherSeries, SeriesError> {
    let mut observations: Vec<Observation> = Vec::with_capacity(rows.len());
    let mut row_numbers = Vec::with_capacity(rows.len());
    for raw in rows {
        let timestamp = DateTime::parse_from_rfc3339(&raw.timestamp)
            .map_err(|e| malformed(raw.row, "timestamp", format!("`{}`: {e}", raw.timestamp)))?
            .with_timezone(&Utc);
        if let Some(prev) = observations.last() {
            if timestamp <= prev.timestamp {
                return Err(SeriesError::UnsortedTimestamps {
                    row: raw.row,
                    timestamp: raw.timestamp,
                });
            }
        }
        let mut obs = Observation::empty(timestamp);
        for (kind, value) in raw.values {
            if let Some(v) = value {
                if !kind.in_bounds(v) {
                    return Err(SeriesError::RangeViolation {
                        row: raw.row,
                        variable: kind,
                        value: v,
                        bounds: kind.bounds_text(),
                    });
                }
            }
            obs.set(kind, value);
        }
        if !obs.has_any() {
            return Err(malformed(raw.row, "*", "row has no variable values"));
        }
        observations.push(obs);
        row_numbers.push(raw.row);
    }
    if observations.len() < 2 {
        return Err(SeriesError::TooShort {
            len: observations.len(),
        });
    }

    let variables_present: BTreeSet<VariableKind> = VariableKind::ALL
        .into_iter()
        .filter(|&k| observations.iter().any(|o| o.get(k).is_some()))
        .collect();

    for &kind in &variables_present {
        if allow_gaps {
            interpolate_interior(&mut observations, kind);
        } else if let Some(i) = observations.iter().position(|o| o.get(kind).is_none()) {
            return Err(SeriesError::GapNotAllowed {
                row: row_numbers[i],
                variable: kind,
            });
        }
    }

    Ok(WeatherSeries {
        station_id,
        observations,
        variables_present,
    })
}

/// Fill interior gaps of one variable by linear interpolation in time.
fn interpolate_interior(observations: &mut [Observation], kind: VariableKind) {
    let present: Vec<usize> = observations
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.get(kind).map(|_| i))
        .collect();
    for pair in present.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi - lo < 2 {
            continue;
        }
        let (t0, v0) = (observations[lo].timestamp, observations[lo].get(kind).unwrap());
        let (t1, v1) = (observations[hi].timestamp, observations[hi].get(kind).unwrap());
        let span = (t1 - t0).num_milliseconds() as f64;
        for obs in &mut observations[lo + 1..hi] {
            let frac = (obs.timestamp - t0).num_milliseconds() as f64 / span;
            obs.set(kind, Some(v0 + (v1 - v0) * frac));
        }
    }
}

impl WeatherSeries {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn duration_hours(&self) -> f64 {
        match (self.observations.first(), self.observations.last()) {
            (Some(a), Some(b)) => hours_between(a.timestamp, b.timestamp),
            _ => 0.0,
        }
    }

    /// True when every consecutive pair of timestamps is exactly one hour apart.
    pub fn is_hourly(&self) -> bool {
        self.observations
            .windows(2)
            .all(|w| (w[1].timestamp - w[0].timestamp).num_seconds() == 3600)
    }

    /// Values of one variable aligned to observation positions.
    pub fn column(&self, kind: VariableKind) -> Vec<Option<f64>> {
        self.observations.iter().map(|o| o.get(kind)).collect()
    }
}

fn hours_between(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    (b - a).num_milliseconds() as f64 / 3_600_000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrendLabel {
    Rising,
    Falling,
    Stationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeriodicLabel {
    DiurnalPeriodic,
    Aperiodic,
    Unknown,
}

impl fmt::Display for TrendLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrendLabel::Rising => "rising",
            TrendLabel::Falling => "falling",
            TrendLabel::Stationary => "stationary",
        })
    }
}

impl fmt::Display for PeriodicLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeriodicLabel::DiurnalPeriodic => "diurnal-periodic",
            PeriodicLabel::Aperiodic => "aperiodic",
            PeriodicLabel::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub variable: VariableKind,
    pub count: usize,
    pub mean: f64,
    pub sample_std: f64,
    pub min: f64,
    pub max: f64,
    pub min_timestamp: DateTime<Utc>,
    pub max_timestamp: DateTime<Utc>,
    /// Units per hour.
    pub ols_slope: f64,
    pub trend_label: TrendLabel,
    pub anomaly_indices: Vec<usize>,
    pub lag24_autocorrelation: Option<f64>,
    pub periodic_label: PeriodicLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub variables: Vec<VariableSummary>,
}

impl SeriesSummary {
    pub fn get(&self, kind: VariableKind) -> Option<&VariableSummary> {
        self.variables.iter().find(|v| v.variable == kind)
    }
}

/// Per-variable statistics over present values only.
pub fn summarize(series: &WeatherSeries) -> SeriesSummary {
    let start = series.observations[0].timestamp;
    let duration = series.duration_hours();
    let hourly = series.len() >= DIURNAL_MIN_LEN && series.is_hourly();

    let variables = series
        .variables_present
        .iter()
        .filter_map(|&kind| {
            let points: Vec<(usize, f64, f64)> = series
                .observations
                .iter()
                .enumerate()
                .filter_map(|(i, o)| o.get(kind).map(|v| (i, hours_between(start, o.timestamp), v)))
                .collect();
            if points.is_empty() {
                return None;
            }
            Some(summarize_variable(series, kind, &points, duration, hourly))
        })
        .collect();
    SeriesSummary { variables }
}

fn summarize_variable(
    series: &WeatherSeries,
    kind: VariableKind,
    points: &[(usize, f64, f64)],
    duration_hours: f64,
    hourly: bool,
) -> VariableSummary {
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.2).sum::<f64>() / n;
    let sample_std = if points.len() > 1 {
        (points.iter().map(|p| (p.2 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };

    let (mut min_i, mut max_i) = (0, 0);
    for (j, p) in points.iter().enumerate() {
        if p.2 < points[min_i].2 {
            min_i = j;
        }
        if p.2 > points[max_i].2 {
            max_i = j;
        }
    }
    // clamp guards against rounding drift in the mean of near-constant data
    let (min, max) = (points[min_i].2, points[max_i].2);
    let mean = mean.clamp(min, max);

    let h_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.1 - h_mean).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.1 - h_mean) * (p.2 - mean)).sum();
    let ols_slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };

    let change = ols_slope * duration_hours;
    let trend_label = if change.abs() > TREND_SIGMA_FRACTION * sample_std {
        if change > 0.0 {
            TrendLabel::Rising
        } else {
            TrendLabel::Falling
        }
    } else {
        TrendLabel::Stationary
    };

    let anomaly_indices = points
        .iter()
        .filter(|p| (p.2 - mean).abs() > ANOMALY_SIGMAS * sample_std)
        .map(|p| p.0)
        .collect();

    let lag24_autocorrelation = if hourly {
        lag_correlation(&series.column(kind), DIURNAL_LAG)
    } else {
        None
    };
    let periodic_label = match lag24_autocorrelation {
        Some(r) if r > PERIODIC_THRESHOLD => PeriodicLabel::DiurnalPeriodic,
        Some(_) => PeriodicLabel::Aperiodic,
        None => PeriodicLabel::Unknown,
    };

    VariableSummary {
        variable: kind,
        count: points.len(),
        mean,
        sample_std,
        min,
        max,
        min_timestamp: series.observations[points[min_i].0].timestamp,
        max_timestamp: series.observations[points[max_i].0].timestamp,
        ols_slope,
        trend_label,
        anomaly_indices,
        lag24_autocorrelation,
        periodic_label,
    }
}

/// Pearson correlation between the series and itself shifted by `lag`,
/// over positions where both values are present.
fn lag_correlation(values: &[Option<f64>], lag: usize) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(values.iter().skip(lag))
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .collect();
    if pairs.len() < 3 {
        return None;
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
    let va: f64 = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum();
    let vb: f64 = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum();
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Indices of `max_rows` evenly spaced rows out of `len`, always keeping
/// the first and last row.
pub fn downsample_indices(len: usize, max_rows: usize) -> Vec<usize> {
    if len <= max_rows {
        return (0..len).collect();
    }
    let max_rows = max_rows.max(2);
    let span = len - 1;
    let steps = max_rows - 1;
    (0..max_rows).map(|i| (i * span + steps / 2) / steps).collect()
}

fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Render a series as a plain-text table followed by a SUMMARY block.
pub fn serialize_for_prompt(series: &WeatherSeries, summary: &SeriesSummary, max_rows: usize) -> String {
    let vars: Vec<VariableKind> = series.variables_present.iter().copied().collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "station: {}  observations: {}  span: {} to {}",
        if series.station_id.is_empty() {
            "unknown"
        } else {
            &series.station_id
        },
        series.len(),
        format_timestamp(series.observations[0].timestamp),
        format_timestamp(series.observations[series.len() - 1].timestamp),
    );
    out.push_str("timestamp");
    for v in &vars {
        out.push(',');
        out.push_str(v.column());
    }
    out.push('\n');
    for i in downsample_indices(series.len(), max_rows) {
        let obs = &series.observations[i];
        out.push_str(&format_timestamp(obs.timestamp));
        for &v in &vars {
            out.push(',');
            match obs.get(v) {
                Some(x) => {
                    let _ = write!(out, "{x:.1}");
                }
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&render_summary(summary));
    out
}

/// The SUMMARY block on its own.
pub fn render_summary(summary: &SeriesSummary) -> String {
    let mut out = String::from("SUMMARY\n");
    for v in &summary.variables {
        let _ = write!(
            out,
            "{}: mean={:.1} std={:.1} min={:.1}@{} max={:.1}@{} slope={:.3}/h trend={} anomalies={}",
            v.variable,
            v.mean,
            v.sample_std,
            v.min,
            format_timestamp(v.min_timestamp),
            v.max,
            format_timestamp(v.max_timestamp),
            v.ols_slope,
            v.trend_label,
            v.anomaly_indices.len(),
        );
        match v.lag24_autocorrelation {
            Some(r) => {
                let _ = writeln!(out, " lag24={r:.2} periodicity={}", v.periodic_label);
            }
            None => {
                let _ = writeln!(out, " periodicity={}", v.periodic_label);
            }
        }
    }
    out
}

/// Human-readable table used by the `stats` command.
pub fn render_stats_table(summary: &SeriesSummary) -> String {
    let mut out = format!(
        "{:<18} {:>6} {:>10} {:>10} {:>10} {:>10} {:>12} {:<11} {:>9} {:>8} {:<16}\n",
        "variable", "n", "mean", "std", "min", "max", "slope/h", "trend", "anomalies", "lag24", "periodicity"
    );
    for v in &summary.variables {
        let lag = v
            .lag24_autocorrelation
            .map(|r| format!("{r:.3}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<18} {:>6} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>12.4} {:<11} {:>9} {:>8} {:<16}",
            v.variable.column(),
            v.count,
            v.mean,
            v.sample_std,
            v.min,
            v.max,
            v.ols_slope,
            v.trend_label.to_string(),
            v.anomaly_indices.len(),
            lag,
            v.periodic_label.to_string(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "timestamp,temperature_c,pressure_hpa,humidity_pct,wind_speed_ms,precipitation_mm\n";

    fn csv(rows: &[&str]) -> Vec<u8> {
        let mut s = HEADER.to_string();
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s.into_bytes()
    }

    fn single_var(values: &[f64]) -> WeatherSeries {
        let mut text = String::from("timestamp,temperature_c\n");
        for (i, v) in values.iter().enumerate() {
            text.push_str(&format!("2024-01-01T{i:02}:00:00Z,{v}\n"));
        }
        parse_series(text.as_bytes(), InputFormat::Csv, false, "t").unwrap()
    }

    #[test]
    fn minimal_csv_parses() {
        let s = parse_series(
            &csv(&[
                "2024-06-01T00:00:00Z,20.0,1012.0,60,3.0,0",
                "2024-06-01T01:00:00+00:00,19.5,1011.5,62,2.5,0.2",
            ]),
            InputFormat::Csv,
            false,
            "S1",
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.variables_present.len(), 5);
    }

    #[test]
    fn humidity_out_of_range() {
        let err = parse_series(
            &csv(&[
                "2024-06-01T00:00:00Z,20.0,1012.0,120,3.0,0",
                "2024-06-01T01:00:00Z,19.5,1011.5,62,2.5,0.2",
            ]),
            InputFormat::Csv,
            false,
            "S1",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SeriesError::RangeViolation {
                variable: VariableKind::Humidity,
                row: 2,
                ..
            }
        ));
    }

    #[test]
    fn interior_gap_interpolates_to_neighbor_average() {
        let s = parse_series(
            &csv(&[
                "2024-06-01T00:00:00Z,10.0,1012,60,3,0",
                "2024-06-01T01:00:00Z,12.0,1012,60,3,0",
                "2024-06-01T02:00:00Z,,1012,60,3,0",
                "2024-06-01T03:00:00Z,15.0,1012,60,3,0",
                "2024-06-01T04:00:00Z,11.0,1012,60,3,0",
            ]),
            InputFormat::Csv,
            true,
            "S1",
        )
        .unwrap();
        assert_eq!(s.observations[2].temperature_c, Some(13.5));
    }

    #[test]
    fn leading_and_trailing_gaps_stay_absent() {
        let s = parse_series(
            &csv(&[
                "2024-06-01T00:00:00Z,,1012,60,3,0",
                "2024-06-01T01:00:00Z,12.0,1012,60,3,0",
                "2024-06-01T02:00:00Z,13.0,1012,60,3,0",
                "2024-06-01T03:00:00Z,,1012,60,3,0",
            ]),
            InputFormat::Csv,
            true,
            "S1",
        )
        .unwrap();
        assert_eq!(s.observations[0].temperature_c, None);
        assert_eq!(s.observations[3].temperature_c, None);
    }

    #[test]
    fn gap_rejected_without_allow_gaps() {
        let err = parse_series(
            &csv(&[
                "2024-06-01T00:00:00Z,10.0,1012,60,3,0",
                "2024-06-01T01:00:00Z,,1012,60,3,0",
                "2024-06-01T02:00:00Z,11.0,1012,60,3,0",
            ]),
            InputFormat::Csv,
            false,
            "S1",
        )
        .unwrap_err();
        assert_eq!(
            err,
            SeriesError::GapNotAllowed {
                row: 3,
                variable: VariableKind::Temperature
            }
        );
    }

    #[test]
    fn structural_errors() {
        let dup = csv(&[
            "2024-06-01T00:00:00Z,10.0,1012,60,3,0",
            "2024-06-01T00:00:00Z,11.0,1012,60,3,0",
        ]);
        assert!(matches!(
            parse_series(&dup, InputFormat::Csv, false, ""),
            Err(SeriesError::UnsortedTimestamps { row: 3, .. })
        ));
        let short = csv(&["2024-06-01T00:00:00Z,10.0,1012,60,3,0"]);
        assert_eq!(
            parse_series(&short, InputFormat::Csv, false, ""),
            Err(SeriesError::TooShort { len: 1 })
        );
        let bad = csv(&[
            "2024-06-01T00:00:00Z,ten,1012,60,3,0",
            "2024-06-01T01:00:00Z,11.0,1012,60,3,0",
        ]);
        match parse_series(&bad, InputFormat::Csv, false, "") {
            Err(SeriesError::MalformedInput { row, column, .. }) => {
                assert_eq!((row, column.as_str()), (2, "temperature_c"))
            }
            other => panic!("unexpected {other:?}"),
        }
        let blank = csv(&["2024-06-01T00:00:00Z,,,,,", "2024-06-01T01:00:00Z,11.0,1012,60,3,0"]);
        assert!(matches!(
            parse_series(&blank, InputFormat::Csv, true, ""),
            Err(SeriesError::MalformedInput { row: 2, .. })
        ));
        assert_eq!(
            parse_series(b"  ", InputFormat::Csv, false, ""),
            Err(SeriesError::Empty)
        );
    }

    #[test]
    fn json_input_matches_csv() {
        let json = br#"[
            {"timestamp": "2024-06-01T00:00:00Z", "temperature_c": 20.0, "humidity_pct": null},
            {"timestamp": "2024-06-01T03:00:00+03:00", "temperature_c": 21.0}
        ]"#;
        let err = parse_series(json, InputFormat::Json, false, "j").unwrap_err();
        // +03:00 is 00:00Z, a duplicate instant
        assert!(matches!(err, SeriesError::UnsortedTimestamps { row: 2, .. }));

        let json = br#"[
            {"timestamp": "2024-06-01T00:00:00Z", "temperature_c": 20.0},
            {"timestamp": "2024-06-01T04:00:00+03:00", "temperature_c": 21.0}
        ]"#;
        let s = parse_series(json, InputFormat::Json, false, "j").unwrap();
        assert_eq!(s.variables_present.len(), 1);
        assert_eq!(s.duration_hours(), 1.0);
    }

    #[test]
    fn constant_series_summary() {
        let s = single_var(&[5.0, 5.0, 5.0, 5.0]);
        let v = summarize(&s).variables[0].clone();
        assert_eq!(v.mean, 5.0);
        assert_eq!(v.sample_std, 0.0);
        assert_eq!(v.trend_label, TrendLabel::Stationary);
        assert!(v.anomaly_indices.is_empty());
        assert_eq!(v.periodic_label, PeriodicLabel::Unknown);
    }

    #[test]
    fn linear_series_has_unit_slope() {
        let s = single_var(&[1.0, 2.0, 3.0, 4.0]);
        let v = summarize(&s).variables[0].clone();
        assert!((v.ols_slope - 1.0).abs() < 1e-12);
        assert_eq!(v.trend_label, TrendLabel::Rising);
    }

    #[test]
    fn downsampling_keeps_endpoints() {
        let idx = downsample_indices(168, 48);
        assert_eq!(idx.len(), 48);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[47], 167);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(downsample_indices(2, 48), vec![0, 1]);
    }

    #[test]
    fn prompt_serialization_is_deterministic() {
        let s = single_var(&[1.0, 2.5, 3.0]);
        let summary = summarize(&s);
        let a = serialize_for_prompt(&s, &summary, 48);
        let b = serialize_for_prompt(&s, &summary, 48);
        assert_eq!(a, b);
        assert!(a.contains("2024-01-01T01:00:00Z,2.5\n"));
        assert!(a.contains("SUMMARY\ntemperature_c: mean=2.2"));
    }
}
