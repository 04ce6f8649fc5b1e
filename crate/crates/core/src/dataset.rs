//! Hourly radiometric data: CSV ingest, remote fetch, gap cleaning,
//! chronological splitting and design-matrix construction.
//!
//! A [`TimeSeriesFrame`] carries GHI plus the eight station covariates.
//! Timestamps are kept in local station time with their UTC offset.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, NaiveDateTime, TimeZone, Timelike};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Station covariates, in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Covariate {
    Temp,
    RH,
    WS,
    BP,
    WD,
    WdStv,
    RainTot,
    WsMax,
}

impl Covariate {
    pub const ALL: [Covariate; 8] = [
        Covariate::Temp,
        Covariate::RH,
        Covariate::WS,
        Covariate::BP,
        Covariate::WD,
        Covariate::WdStv,
        Covariate::RainTot,
        Covariate::WsMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::Temp => "Temp",
            Covariate::RH => "RH",
            Covariate::WS => "WS",
            Covariate::BP => "BP",
            Covariate::WD => "WD",
            Covariate::WdStv => "WD_Stv",
            Covariate::RainTot => "Rain_Tot",
            Covariate::WsMax => "WS_Max",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Covariate::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::arg(format!("unknown feature '{name}'")))
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses feature names into covariates, rejecting unknown names.
pub fn parse_features<S: AsRef<str>>(names: &[S]) -> Result<Vec<Covariate>> {
    names.iter().map(|n| Covariate::from_name(n.as_ref())).collect()
}

/// Maps canonical fields onto CSV header names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub timestamp: String,
    pub ghi: String,
    /// Header name per covariate, keyed by canonical name.
    pub covariates: BTreeMap<String, String>,
    /// Offset applied to timestamps that carry none, in minutes east of UTC.
    pub utc_offset_minutes: i32,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            ghi: "GHI".into(),
            covariates: Covariate::ALL.iter().map(|c| (c.name().to_string(), c.name().to_string())).collect(),
            utc_offset_minutes: 120,
        }
    }
}

impl ColumnMap {
    fn covariate_header(&self, c: Covariate) -> &str {
        self.covariates.get(c.name()).map(String::as_str).unwrap_or(c.name())
    }
}

/// Hourly GHI plus station covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    pub timestamps: Vec<DateTime<FixedOffset>>,
    /// W/m²
    pub ghi: Vec<f64>,
    /// One column per [`Covariate`], in canonical order.
    pub covariates: Vec<Vec<f64>>,
    pub provenance: String,
}

const MISSING_TOKENS: [&str; 6] = ["", "NA", "NaN", "nan", "null", "NULL"];
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%:z";

fn parse_timestamp(raw: &str, offset: FixedOffset) -> Option<DateTime<FixedOffset>> {
    let raw = raw.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%:z", "%Y-%m-%d %H:%M%:z"] {
        if let Ok(t) = DateTime::parse_from_str(raw, fmt) {
            return Some(t);
        }
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(n) = NaiveDateTime::parse_from_str(raw, fmt) {
            return offset.from_local_datetime(&n).single();
        }
    }
    None
}

fn parse_value(raw: &str, line: u64, column: &str) -> Result<f64> {
    let raw = raw.trim();
    if MISSING_TOKENS.contains(&raw) {
        return Ok(f64::NAN);
    }
    raw.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("column '{column}': cannot parse '{raw}' as a number"),
    })
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v}")
    }
}

impl TimeSeriesFrame {
    pub fn empty(provenance: impl Into<String>) -> Self {
        Self {
            timestamps: Vec::new(),
            ghi: Vec::new(),
            covariates: vec![Vec::new(); 8],
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn column(&self, c: Covariate) -> &[f64] {
        &self.covariates[c.index()]
    }

    /// Local hour of day for row `i`.
    pub fn hour(&self, i: usize) -> u32 {
        self.timestamps[i].hour()
    }

    pub fn hours(&self) -> Vec<u32> {
        (0..self.len()).map(|i| self.hour(i)).collect()
    }

    /// Rows `range` as a new frame.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            timestamps: self.timestamps[range.clone()].to_vec(),
            ghi: self.ghi[range.clone()].to_vec(),
            covariates: self.covariates.iter().map(|c| c[range.clone()].to_vec()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            timestamps: rows.iter().map(|&i| self.timestamps[i]).collect(),
            ghi: rows.iter().map(|&i| self.ghi[i]).collect(),
            covariates: self.covariates.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenates `other` after `self`.
    pub fn concat(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.timestamps.extend_from_slice(&other.timestamps);
        out.ghi.extend_from_slice(&other.ghi);
        for (c, o) in out.covariates.iter_mut().zip(&other.covariates) {
            c.extend_from_slice(o);
        }
        out
    }

    fn push_row(&mut self, t: DateTime<FixedOffset>, ghi: f64, cov: &[f64]) {
        self.timestamps.push(t);
        self.ghi.push(ghi);
        for (col, v) in self.covariates.iter_mut().zip(cov) {
            col.push(*v);
        }
    }

    /// Checks the cleaned-frame invariants: hourly grid, strictly increasing,
    /// physical ranges, no missing values.
    pub fn validate(&self) -> Result<()> {
        for w in self.timestamps.windows(2) {
            let secs = (w[1] - w[0]).num_seconds();
            if secs <= 0 || secs % 3600 != 0 {
                return Err(Error::DataQuality(format!("irregular spacing between {} and {}", w[0], w[1])));
            }
        }
        for i in 0..self.len() {
            if !(self.ghi[i] >= 0.0) {
                return Err(Error::DataQuality(format!("row {i}: GHI {} not >= 0", self.ghi[i])));
            }
            if self.covariates.iter().any(|c| !c[i].is_finite()) {
                return Err(Error::DataQuality(format!("row {i}: missing covariate")));
            }
            let rh = self.covariates[Covariate::RH.index()][i];
            if !(0.0..=100.0).contains(&rh) {
                return Err(Error::DataQuality(format!("row {i}: RH {rh} outside [0,100]")));
            }
            let wd = self.covariates[Covariate::WD.index()][i];
            if !(0.0..360.0).contains(&wd) {
                return Err(Error::DataQuality(format!("row {i}: WD {wd} outside [0,360)")));
            }
        }
        Ok(())
    }

    /// Writes the frame as CSV with canonical headers and column order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["timestamp".to_string(), "GHI".to_string()];
        header.extend(Covariate::ALL.iter().map(|c| c.name().to_string()));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.timestamps[i].format(TIMESTAMP_FORMAT).to_string(), format_value(self.ghi[i])];
            rec.extend(self.covariates.iter().map(|c| format_value(c[i])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Parses CSV records from any reader.
pub fn load_reader<R: Read>(reader: R, schema: &ColumnMap, provenance: &str) -> Result<TimeSeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema { column: name.to_string() })
    };
    let ts_idx = find(&schema.timestamp)?;
    let ghi_idx = find(&schema.ghi)?;
    let cov_idx: Vec<usize> = Covariate::ALL
        .iter()
        .map(|&c| find(schema.covariate_header(c)))
        .collect::<Result<_>>()?;
    let offset = FixedOffset::east_opt(schema.utc_offset_minutes * 60)
        .ok_or_else(|| Error::arg(format!("invalid utc offset {} minutes", schema.utc_offset_minutes)))?;

    let mut frame = TimeSeriesFrame::empty(provenance);
    let mut cov = [0.0; 8];
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let raw_ts = rec.get(ts_idx).unwrap_or("");
        let t = parse_timestamp(raw_ts, offset).ok_or_else(|| Error::Parse {
            line,
            message: format!("unparseable timestamp '{raw_ts}'"),
        })?;
        let ghi = parse_value(rec.get(ghi_idx).unwrap_or(""), line, &schema.ghi)?;
        for (k, &idx) in cov_idx.iter().enumerate() {
            cov[k] = parse_value(rec.get(idx).unwrap_or(""), line, Covariate::ALL[k].name())?;
        }
        frame.push_row(t, ghi, &cov);
    }
    Ok(frame)
}

/// Loads an hourly station export. One frame row per CSV record.
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnMap) -> Result<TimeSeriesFrame> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)?;
    load_reader(std::io::BufReader::new(f), schema, &path.display().to_string())
}

/// Inclusive date range requested from a remote archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

/// Downloads an hourly CSV over HTTP GET and parses it like [`load_csv`].
///
/// The window is passed as `start`/`end` query parameters; the payload is not
/// filtered client-side.
pub fn fetch_remote(url: &str, window: DateWindow, schema: &ColumnMap) -> Result<TimeSeriesFrame> {
    if window.end < window.start {
        return Err(Error::arg("empty date window"));
    }
    let resp = ureq::get(url)
        .query("start", window.start.to_string())
        .query("end", window.end.to_string())
        .call();
    let mut resp = match resp {
        Ok(r) => r,
        Err(ureq::Error::StatusCode(status)) => return Err(Error::HttpStatus { status }),
        Err(e) => return Err(Error::Transport(e.to_string())),
    };
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(Error::HttpStatus { status });
    }
    let body = resp.body_mut().read_to_string().map_err(|e| Error::Transport(e.to_string()))?;
    load_reader(body.as_bytes(), schema, url)
}

/// How [`clean`] treats missing hours and missing values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapPolicy {
    /// Gaps of at most this many hours are linearly interpolated.
    pub max_interp_hours: usize,
    /// Cleaning fails if more than this fraction of hourly slots is dropped.
    pub max_drop_fraction: f64,
}

impl Default for GapPolicy {
    fn default() -> Self {
        Self { max_interp_hours: 2, max_drop_fraction: 0.5 }
    }
}

/// Counts of the repairs made by [`clean`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input_rows: usize,
    pub hourly_slots: usize,
    pub duplicates_removed: usize,
    pub off_grid_removed: usize,
    pub values_interpolated: usize,
    pub rows_dropped: usize,
    pub negative_ghi_clamped: usize,
    pub rh_clamped: usize,
    pub wd_wrapped: usize,
}

/// Repairs a raw frame so that it satisfies the [`TimeSeriesFrame`] invariants.
///
/// Rows are placed on the hourly grid starting at the first timestamp. Runs of
/// missing values up to `policy.max_interp_hours` long (with valid neighbours on
/// both sides) are interpolated per column; rows still incomplete are dropped,
/// which leaves multi-hour steps in the timestamp sequence.
pub fn clean(frame: &TimeSeriesFrame, policy: &GapPolicy) -> Result<(TimeSeriesFrame, CleanReport)> {
    if frame.is_empty() {
        return Err(Error::arg("cannot clean an empty frame"));
    }
    let mut report = CleanReport { input_rows: frame.len(), ..Default::default() };

    let mut order: Vec<usize> = (0..frame.len()).collect();
    order.sort_by_key(|&i| frame.timestamps[i]);
    let t0 = frame.timestamps[order[0]];
    let offset = *t0.offset();

    let mut slots: BTreeMap<i64, usize> = BTreeMap::new();
    for &i in &order {
        let secs = (frame.timestamps[i] - t0).num_seconds();
        if secs % 3600 != 0 {
            report.off_grid_removed += 1;
            continue;
        }
        // stable sort: the first occurrence in file order wins
        if slots.contains_key(&(secs / 3600)) {
            report.duplicates_removed += 1;
        } else {
            slots.insert(secs / 3600, i);
        }
    }
    let last = *slots.keys().next_back().unwrap();
    let n = (last + 1) as usize;
    report.hourly_slots = n;

    // grid[column][slot]; column 0 = GHI, 1..=8 covariates
    let mut grid = vec![vec![f64::NAN; n]; 9];
    for (&slot, &i) in &slots {
        let s = slot as usize;
        grid[0][s] = frame.ghi[i];
        for k in 0..8 {
            grid[k + 1][s] = frame.covariates[k][i];
        }
    }

    for v in grid[0].iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            report.negative_ghi_clamped += 1;
        }
    }
    for v in grid[1 + Covariate::RH.index()].iter_mut() {
        if v.is_finite() && !(0.0..=100.0).contains(v) {
            *v = v.clamp(0.0, 100.0);
            report.rh_clamped += 1;
        }
    }
    for v in grid[1 + Covariate::WD.index()].iter_mut() {
        if v.is_finite() && !(0.0..360.0).contains(v) {
            let w = v.rem_euclid(360.0);
            *v = if w >= 360.0 { 0.0 } else { w };
            report.wd_wrapped += 1;
        }
    }

    for col in grid.iter_mut() {
        report.values_interpolated += interpolate_short_gaps(col, policy.max_interp_hours);
    }

    let mut out = TimeSeriesFrame::empty(frame.provenance.clone());
    let mut cov = [0.0; 8];
    for s in 0..n {
        if grid.iter().any(|c| c[s].is_nan()) {
            report.rows_dropped += 1;
            continue;
        }
        for k in 0..8 {
            cov[k] = grid[k + 1][s];
        }
        let t = (t0 + Duration::hours(s as i64)).with_timezone(&offset);
        out.push_row(t, grid[0][s], &cov);
    }

    if report.negative_ghi_clamped > 0 {
        log::warn!("clamped {} negative GHI values to 0", report.negative_ghi_clamped);
    }
    if report.rows_dropped > 0 {
        log::warn!("dropped {} of {} hourly slots with unrepairable gaps", report.rows_dropped, n);
    }
    if report.rows_dropped as f64 > policy.max_drop_fraction * n as f64 {
        return Err(Error::DataQuality(format!(
            "{} of {} hourly slots dropped (limit {:.0}%)",
            report.rows_dropped,
            n,
            policy.max_drop_fraction * 100.0
        )));
    }
    out.validate()?;
    Ok((out, report))
}

/// Fills interior NaN runs of length `<= max_len` by linear interpolation.
/// Returns the number of filled values.
fn interpolate_short_gaps(col: &mut [f64], max_len: usize) -> usize {
    let n = col.len();
    let mut filled = 0;
    let mut i = 0;
    while i < n {
        if !col[i].is_nan() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && col[i].is_nan() {
            i += 1;
        }
        let len = i - start;
        if start == 0 || i == n || len > max_len {
            continue;
        }
        let (a, b) = (col[start - 1], col[i]);
        let span = (len + 1) as f64;
        for (k, v) in col[start..i].iter_mut().enumerate() {
            let w = (k + 1) as f64 / span;
            *v = a + (b - a) * w;
        }
        filled += len;
    }
    filled
}

/// Chronological train/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: TimeSeriesFrame,
    pub test: TimeSeriesFrame,
    pub ratio: f64,
}

/// Splits chronologically: the first `round(ratio * N)` rows train, the rest test.
pub fn split(frame: &TimeSeriesFrame, ratio: f64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::arg(format!("split ratio {ratio} outside (0,1)")));
    }
    let n_train = (ratio * frame.len() as f64).round() as usize;
    Ok(DatasetSplit {
        train: frame.slice(0..n_train),
        test: frame.slice(n_train..frame.len()),
        ratio,
    })
}

/// Column centring/scaling retained for prediction-time transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    /// Fits per-column mean and sample standard deviation. Constant columns are
    /// centred but left unscaled.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut scales = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let col = x.column(j);
            let m = col.sum() / n;
            let var = if x.nrows() > 1 {
                col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let sd = var.sqrt();
            if sd > 1e-12 * m.abs().max(1.0) {
                scales.push(sd);
            } else {
                log::warn!("column {j} is constant; passed through unscaled");
                scales.push(1.0);
            }
            means.push(m);
        }
        Self { means, scales }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.means[j]) / self.scales[j])
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, v)| (v - self.means[j]) / self.scales[j]).collect()
    }
}

/// Regressor matrix and target extracted from a frame.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub features: Vec<Covariate>,
    pub standardizer: Option<Standardizer>,
}

/// Raw covariate matrix (rows × features) for a frame.
pub fn covariate_matrix(frame: &TimeSeriesFrame, features: &[Covariate]) -> DMatrix<f64> {
    DMatrix::from_fn(frame.len(), features.len(), |i, j| frame.covariates[features[j].index()][i])
}

/// Builds the N × |features| regressor matrix and GHI target.
pub fn design_matrix(frame: &TimeSeriesFrame, features: &[Covariate], standardize: bool) -> Result<Design> {
    let mut seen = std::collections::HashSet::new();
    for f in features {
        if !seen.insert(*f) {
            return Err(Error::arg(format!("feature '{f}' listed twice")));
        }
    }
    let raw = covariate_matrix(frame, features);
    let y = DVector::from_column_slice(&frame.ghi);
    let (x, standardizer) = if standardize {
        let s = Standardizer::fit(&raw);
        (s.transform(&raw), Some(s))
    } else {
        (raw, None)
    };
    Ok(Design { x, y, features: features.to_vec(), standardizer })
}

/// Name-based variant of [`design_matrix`].
pub fn design_matrix_by_name<S: AsRef<str>>(frame: &TimeSeriesFrame, features: &[S], standardize: bool) -> Result<Design> {
    design_matrix(frame, &parse_features(features)?, standardize)
}

/// Deterministic synthetic station record with a diurnal GHI cycle, day-level
/// cloudiness and covariates correlated with irradiance.
pub fn synthetic(days: usize, seed: u64) -> TimeSeriesFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let offset = FixedOffset::east_opt(2 * 3600).unwrap();
    let t0 = offset.with_ymd_and_hms(2020, 7, 1, 0, 0, 0).unwrap();
    let round2 = |v: f64| (v * 100.0).round() / 100.0;

    let mut frame = TimeSeriesFrame::empty(format!("synthetic:{days}d:seed{seed}"));
    let mut cloud_day: f64 = 0.8;
    for d in 0..days {
        cloud_day = (0.6 * cloud_day + 0.4 * rng.random_range(0.25..1.0)).clamp(0.2, 1.0);
        let bp_day = 860.0 + 3.0 * (2.0 * std::f64::consts::PI * d as f64 / 7.0).sin();
        for h in 0..24 {
            let hf = h as f64;
            let sun = if (7..=19).contains(&h) {
                (std::f64::consts::PI * (hf - 6.5) / 13.0).sin().max(0.0)
            } else {
                0.0
            };
            let cloud = (cloud_day + 0.12 * std.sample(&mut rng)).clamp(0.05, 1.0);
            let ghi = round2(950.0 * sun.powf(1.3) * cloud);
            let temp = round2(
                11.0 + 12.0 * sun * cloud + 2.5 * (2.0 * std::f64::consts::PI * (hf - 9.0) / 24.0).sin()
                    + 0.8 * std.sample(&mut rng),
            );
            let rh = round2((62.0 - 28.0 * sun * cloud + 4.0 * std.sample(&mut rng)).clamp(5.0, 100.0));
            let ws = round2((1.8 + 1.6 * sun + 0.7 * std.sample(&mut rng)).abs());
            let ws_max = round2(ws + 0.5 + (0.8 * std.sample(&mut rng)).abs());
            let bp = round2(bp_day - 1.5 * sun + 0.3 * std.sample(&mut rng));
            let wd = round2((200.0 + 50.0 * std.sample(&mut rng)).rem_euclid(360.0));
            let wd_stv = round2((14.0 + 6.0 * sun + 3.0 * std.sample(&mut rng)).abs());
            let rain = if cloud_day < 0.4 && rng.random::<f64>() < 0.1 {
                round2(rng.random_range(0.1..4.0))
            } else {
                0.0
            };
            let t = t0 + Duration::hours((d * 24 + h) as i64);
            frame.push_row(t, ghi, &[temp, rh, ws, bp, wd, wd_stv, rain, ws_max]);
        }
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "timestamp,GHI,Temp,RH,WS,BP,WD,WD_Stv,Rain_Tot,WS_Max\n";

    fn row(h: u32, ghi: &str, temp: &str) -> String {
        format!("2021-01-01T{h:02}:00:00+02:00,{ghi},{temp},50,2,860,180,10,0,3\n")
    }

    fn frame_from(text: &str) -> TimeSeriesFrame {
        load_reader(text.as_bytes(), &ColumnMap::default(), "test").unwrap()
    }

    #[test]
    fn empty_file_with_header_gives_empty_frame() {
        let f = frame_from(HEADER);
        assert_eq!(f.len(), 0);
    }

    #[test]
    fn missing_column_is_named() {
        let err = load_reader("timestamp,GHI\n".as_bytes(), &ColumnMap::default(), "t").unwrap_err();
        assert!(matches!(err, Error::Schema { ref column } if column == "Temp"), "{err}");
    }

    #[test]
    fn bad_timestamp_reports_line() {
        let text = format!("{HEADER}{}not-a-time,1,1,1,1,1,1,1,1,1\n", row(0, "0", "20"));
        let err = load_reader(text.as_bytes(), &ColumnMap::default(), "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn naive_timestamps_take_schema_offset() {
        let text = format!("{HEADER}2021-01-01 05:00,1,1,1,1,1,1,1,1,1\n");
        let f = frame_from(&text);
        assert_eq!(f.timestamps[0].offset().local_minus_utc(), 7200);
        assert_eq!(f.hour(0), 5);
    }

    #[test]
    fn ghi_round_trips_byte_for_byte() {
        let values: Vec<String> = (0..24)
            .map(|h| {
                let v = if (7..=19).contains(&h) { (h as f64 * 37.25) - 200.125 } else { 0.0 };
                format!("{}", v.max(0.0))
            })
            .collect();
        let mut text = HEADER.to_string();
        for (h, v) in values.iter().enumerate() {
            text.push_str(&row(h as u32, v, "20"));
        }
        let f = frame_from(&text);
        assert_eq!(f.len(), 24);
        let formatted: Vec<String> = f.ghi.iter().map(|v| format_value(*v)).collect();
        assert_eq!(formatted, values);
        let again = frame_from(&f.to_csv_string());
        assert_eq!(again, f);
    }

    #[test]
    fn clean_is_identity_without_gaps() {
        let f = synthetic(2, 1);
        let (c, report) = clean(&f, &GapPolicy::default()).unwrap();
        assert_eq!(c, f);
        assert_eq!(report.rows_dropped, 0);
    }

    #[test]
    fn single_missing_value_is_interpolated() {
        let text = format!("{HEADER}{}{}{}", row(0, "0", "20"), row(1, "0", "NA"), row(2, "0", "22"));
        let (c, report) = clean(&frame_from(&text), &GapPolicy::default()).unwrap();
        assert_eq!(c.column(Covariate::Temp)[1], 21.0);
        assert_eq!(report.values_interpolated, 1);
    }

    #[test]
    fn missing_hours_are_reinserted_and_interpolated() {
        let text = format!("{HEADER}{}{}", row(0, "10", "20"), row(3, "40", "23"));
        let (c, _) = clean(&frame_from(&text), &GapPolicy::default()).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.ghi, vec![10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn long_gap_rows_are_dropped() {
        let mut f = synthetic(2, 3);
        for i in 10..15 {
            f.covariates[Covariate::WS.index()][i] = f64::NAN;
        }
        let (c, report) = clean(&f, &GapPolicy::default()).unwrap();
        assert_eq!(report.rows_dropped, 5);
        assert_eq!(c.len(), 43);
        // independent re-validation of spacing
        let steps: Vec<i64> = c.timestamps.windows(2).map(|w| (w[1] - w[0]).num_hours()).collect();
        assert_eq!(steps.iter().filter(|&&s| s == 1).count(), 41);
        assert_eq!(steps.iter().filter(|&&s| s == 6).count(), 1);
        assert!(c.timestamps.windows(2).all(|w| (w[1] - w[0]).num_seconds() % 3600 == 0));
    }

    #[test]
    fn negative_ghi_is_clamped() {
        let text = format!("{HEADER}{}", row(0, "-3.5", "20"));
        let (c, report) = clean(&frame_from(&text), &GapPolicy::default()).unwrap();
        assert_eq!(c.ghi[0], 0.0);
        assert_eq!(report.negative_ghi_clamped, 1);
    }

    #[test]
    fn excessive_dropping_is_refused() {
        let mut f = synthetic(1, 3);
        for i in 0..20 {
            f.ghi[i] = f64::NAN;
        }
        assert!(matches!(clean(&f, &GapPolicy::default()), Err(Error::DataQuality(_))));
    }

    #[test]
    fn clean_empty_is_an_argument_error() {
        assert!(matches!(clean(&TimeSeriesFrame::empty("x"), &GapPolicy::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn split_sizes() {
        let f = synthetic(1, 0).slice(0..10);
        let s = split(&f, 0.8).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        assert!(s.train.timestamps.last().unwrap() < s.test.timestamps.first().unwrap());
        assert_eq!(s.train.concat(&s.test), f);
        assert_eq!((0.8f64 * 8522.0).round() as usize, 6818);
        assert!(split(&f, 1.0).is_err());
        assert!(split(&f, 0.0).is_err());
    }

    #[test]
    fn standardize_two_point_column() {
        let mut f = synthetic(1, 0).slice(0..2);
        f.covariates[0] = vec![1.0, 3.0];
        let d = design_matrix(&f, &[Covariate::Temp], true).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((d.x[(0, 0)] + h).abs() < 1e-15 && (d.x[(1, 0)] - h).abs() < 1e-15);
        // direct recomputation
        let col: Vec<f64> = d.x.column(0).iter().copied().collect();
        let m = col.iter().sum::<f64>() / 2.0;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 1.0).sqrt();
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn design_matrix_shapes_and_identity() {
        let f = synthetic(3, 2);
        let d = design_matrix(&f, &Covariate::ALL, false).unwrap();
        assert_eq!(d.x.shape(), (72, 8));
        assert_eq!(d.x[(5, 3)], f.column(Covariate::BP)[5]);
        assert!(design_matrix_by_name(&f, &["Temp", "Clouds"], true).is_err());
    }

    #[test]
    fn synthetic_frame_is_clean() {
        let f = synthetic(30, 7);
        assert_eq!(f.len(), 720);
        f.validate().unwrap();
        assert!(f.ghi.iter().any(|&g| g > 300.0));
        assert!(f.ghi.iter().filter(|&&g| g == 0.0).count() > 200);
    }
}
