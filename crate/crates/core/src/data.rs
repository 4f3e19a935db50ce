//! Sensor-day records: CSV ingestion, day-class partitioning, train/test
//! splitting and controlled corruption of fully observed days.
//!
//! Raw input is a UTF-8 CSV with a header row and exactly three columns:
//!
//! | column      | content                                                  |
//! |-------------|----------------------------------------------------------|
//! | `timestamp` | `YYYY-MM-DDTHH:MM:SS`, aligned to the interval grid       |
//! | `sensor_id` | opaque string                                            |
//! | `flow`      | non-negative integer count for the interval              |
//!
//! With `T` intervals per day the grid step is `1440 / T` minutes, so the
//! record stamped `10:05` lands at index `10 * 12 + 1 = 121` when `T = 288`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_INTERVALS: usize = 288;

/// One sensor-day of flow counts and its observation mask (`true` = observed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub sensor_id: String,
    pub day: NaiveDate,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DailySeries {
    pub fn new(
        sensor_id: impl Into<String>,
        day: NaiveDate,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::InvalidArgument(format!(
                "values has {} entries but mask has {}",
                values.len(),
                mask.len()
            )));
        }
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "series must have at least one interval".into(),
            ));
        }
        for (t, (&v, &m)) in values.iter().zip(&mask).enumerate() {
            if m && !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "observed value {v} at interval {t} must be finite and non-negative"
                )));
            }
        }
        Ok(Self {
            sensor_id: sensor_id.into(),
            day,
            values,
            mask,
        })
    }

    /// A series with every interval observed.
    pub fn complete(
        sensor_id: impl Into<String>,
        day: NaiveDate,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mask = vec![true; values.len()];
        Self::new(sensor_id, day, values, mask)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn missing_fraction(&self) -> f64 {
        1.0 - self.observed_count() as f64 / self.len() as f64
    }

    pub fn day_class(&self) -> DayClass {
        DayClass::of(self.day)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DayClass {
    Weekday,
    #[serde(rename = "nonweekday")]
    NonWeekday,
}

impl DayClass {
    pub const ALL: [DayClass; 2] = [DayClass::Weekday, DayClass::NonWeekday];

    /// Monday through Friday are weekdays.
    pub fn of(day: NaiveDate) -> Self {
        match day.weekday() {
            Weekday::Sat | Weekday::Sun => DayClass::NonWeekday,
            _ => DayClass::Weekday,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DayClass::Weekday => "weekday",
            DayClass::NonWeekday => "nonweekday",
        }
    }
}

impl fmt::Display for DayClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DayClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weekday" => Ok(DayClass::Weekday),
            "nonweekday" | "non-weekday" => Ok(DayClass::NonWeekday),
            other => Err(Error::InvalidArgument(format!(
                "unknown day class {other:?} (expected weekday or nonweekday)"
            ))),
        }
    }
}

/// All days of one sensor and day class, partitioned by completeness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorDataset {
    pub sensor_id: String,
    pub day_class: DayClass,
    pub fully_observed: Vec<DailySeries>,
    pub corrupted: Vec<DailySeries>,
}

impl SensorDataset {
    /// Routes complete days to `fully_observed` and partially covered days to
    /// `corrupted`. Series belonging to another sensor are rejected.
    pub fn from_series(
        sensor_id: impl Into<String>,
        day_class: DayClass,
        series: Vec<DailySeries>,
    ) -> Result<Self> {
        let sensor_id = sensor_id.into();
        let mut fully_observed = Vec::new();
        let mut corrupted = Vec::new();
        for s in series {
            if s.sensor_id != sensor_id {
                return Err(Error::InvalidArgument(format!(
                    "series for sensor {} passed to dataset of sensor {sensor_id}",
                    s.sensor_id
                )));
            }
            if s.is_fully_observed() {
                fully_observed.push(s);
            } else {
                corrupted.push(s);
            }
        }
        Ok(Self {
            sensor_id,
            day_class,
            fully_observed,
            corrupted,
        })
    }

    pub fn intervals(&self) -> Option<usize> {
        self.fully_observed
            .first()
            .or_else(|| self.corrupted.first())
            .map(DailySeries::len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DatasetFile::from_dataset(self);
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(f), &file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let file: DatasetFile = serde_json::from_reader(BufReader::new(f))?;
        file.into_dataset()
    }
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// On-disk layout of a [`SensorDataset`]: one column per field, one row per
/// day. `subset` is `"full"` or `"corrupted"`; masks are stored as 0/1.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    schema: String,
    schema_version: u32,
    sensor_id: String,
    day_class: DayClass,
    intervals: usize,
    day: Vec<NaiveDate>,
    subset: Vec<String>,
    values: Vec<Vec<f64>>,
    mask: Vec<Vec<u8>>,
}

impl DatasetFile {
    fn from_dataset(ds: &SensorDataset) -> Self {
        let rows = ds
            .fully_observed
            .iter()
            .map(|s| ("full", s))
            .chain(ds.corrupted.iter().map(|s| ("corrupted", s)));
        let mut out = DatasetFile {
            schema: "gasfgan.dataset".into(),
            schema_version: DATASET_SCHEMA_VERSION,
            sensor_id: ds.sensor_id.clone(),
            day_class: ds.day_class,
            intervals: ds.intervals().unwrap_or(0),
            day: Vec::new(),
            subset: Vec::new(),
            values: Vec::new(),
            mask: Vec::new(),
        };
        for (subset, s) in rows {
            out.day.push(s.day);
            out.subset.push(subset.to_string());
            out.values.push(s.values.clone());
            out.mask.push(s.mask.iter().map(|&m| u8::from(m)).collect());
        }
        out
    }

    fn into_dataset(self) -> Result<SensorDataset> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "dataset schema version {} is not supported (expected {DATASET_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let n = self.day.len();
        if self.subset.len() != n || self.values.len() != n || self.mask.len() != n {
            return Err(Error::InvalidArgument(
                "dataset columns have unequal lengths".into(),
            ));
        }
        let mut ds = SensorDataset {
            sensor_id: self.sensor_id.clone(),
            day_class: self.day_class,
            fully_observed: Vec::new(),
            corrupted: Vec::new(),
        };
        for (((day, subset), values), mask) in self
            .day
            .into_iter()
            .zip(self.subset)
            .zip(self.values)
            .zip(self.mask)
        {
            let mask = mask.into_iter().map(|m| m != 0).collect();
            let s = DailySeries::new(self.sensor_id.clone(), day, values, mask)?;
            match subset.as_str() {
                "full" => ds.fully_observed.push(s),
                "corrupted" => ds.corrupted.push(s),
                other => {
                    return Err(Error::InvalidArgument(format!("unknown subset {other:?}")));
                }
            }
        }
        Ok(ds)
    }
}

fn interval_minutes(intervals: usize) -> Result<u32> {
    if intervals == 0 || 1440 % intervals != 0 {
        return Err(Error::InvalidArgument(format!(
            "{intervals} intervals do not divide a day evenly"
        )));
    }
    Ok((1440 / intervals) as u32)
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S").ok()
}

/// Loads every sensor in a CSV file, keyed by sensor id. Days are sorted
/// and days without a single observed interval are dropped.
pub fn load_csv(path: &Path, intervals: usize) -> Result<BTreeMap<String, Vec<DailySeries>>> {
    load_filtered(path, intervals, None)
}

/// Loads the days of one sensor from a CSV file; rows of other sensors are skipped.
pub fn load_sensor_csv(path: &Path, sensor_id: &str, intervals: usize) -> Result<Vec<DailySeries>> {
    Ok(load_filtered(path, intervals, Some(sensor_id))?
        .remove(sensor_id)
        .unwrap_or_default())
}

/// Writes observed intervals in the ingestion CSV layout (missing intervals
/// are omitted, matching how gaps appear in raw feeds).
pub fn write_csv<'a>(path: &Path, series: impl IntoIterator<Item = &'a DailySeries>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["timestamp", "sensor_id", "flow"])
        .map_err(io)?;
    for s in series {
        let step = interval_minutes(s.len())? as i64;
        let midnight = s.day.and_hms_opt(0, 0, 0).expect("valid midnight");
        for (t, (&v, &m)) in s.values.iter().zip(&s.mask).enumerate() {
            if !m {
                continue;
            }
            let ts = midnight + chrono::Duration::minutes(step * t as i64);
            w.write_record([
                ts.format("%Y-%m-%dT%H:%M:%S").to_string(),
                s.sensor_id.clone(),
                format!("{}", v.round() as u64),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_filtered(
    path: &Path,
    intervals: usize,
    only: Option<&str>,
) -> Result<BTreeMap<String, Vec<DailySeries>>> {
    let step = interval_minutes(intervals)?;
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(BufReader::new(f));

    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    type Day = (Vec<f64>, Vec<bool>, Vec<u64>);
    let mut days: BTreeMap<(String, NaiveDate), Day> = BTreeMap::new();
    let mut header_seen = false;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if !header_seen {
            header_seen = true;
            let cols: Vec<&str> = record.iter().map(str::trim).collect();
            if cols != ["timestamp", "sensor_id", "flow"] {
                return Err(parse_err(
                    line,
                    format!(
                        "expected header timestamp,sensor_id,flow but found {}",
                        cols.join(",")
                    ),
                ));
            }
            continue;
        }
        if record.len() != 3 {
            return Err(parse_err(
                line,
                format!("expected 3 fields, found {}", record.len()),
            ));
        }
        let ts_raw = record[0].trim();
        let sensor = record[1].trim();
        if sensor.is_empty() {
            return Err(parse_err(line, "empty sensor_id".into()));
        }
        if only.is_some_and(|o| o != sensor) {
            continue;
        }
        let ts = parse_timestamp(ts_raw)
            .ok_or_else(|| parse_err(line, format!("malformed timestamp {ts_raw:?}")))?;
        let flow: u64 = record[2].trim().parse().map_err(|_| {
            parse_err(
                line,
                format!("flow {:?} is not a non-negative integer", &record[2]),
            )
        })?;
        let minute = ts.hour() * 60 + ts.minute();
        if ts.second() != 0 || minute % step != 0 {
            return Err(parse_err(
                line,
                format!("timestamp {ts_raw} is not aligned to the {step}-minute grid"),
            ));
        }
        let t = (minute / step) as usize;
        let entry = days
            .entry((sensor.to_string(), ts.date()))
            .or_insert_with(|| {
                (
                    vec![0.0; intervals],
                    vec![false; intervals],
                    vec![0; intervals],
                )
            });
        if entry.1[t] {
            return Err(Error::Conflict {
                path: path.to_path_buf(),
                line,
                sensor_id: sensor.to_string(),
                timestamp: ts_raw.to_string(),
            });
        }
        entry.0[t] = flow as f64;
        entry.1[t] = true;
        entry.2[t] = line;
    }

    let mut out: BTreeMap<String, Vec<DailySeries>> = BTreeMap::new();
    for ((sensor, day), (values, mask, _)) in days {
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let series = DailySeries::new(sensor.clone(), day, values, mask)?;
        out.entry(sensor).or_default().push(series);
    }
    Ok(out)
}

/// Monday–Friday versus Saturday–Sunday, preserving input order.
pub fn split_day_classes(series: Vec<DailySeries>) -> (Vec<DailySeries>, Vec<DailySeries>) {
    split_day_classes_with_holidays(series, &BTreeSet::new())
}

/// As [`split_day_classes`], with the listed dates also treated as non-weekdays.
pub fn split_day_classes_with_holidays(
    series: Vec<DailySeries>,
    holidays: &BTreeSet<NaiveDate>,
) -> (Vec<DailySeries>, Vec<DailySeries>) {
    series
        .into_iter()
        .partition(|s| s.day_class() == DayClass::Weekday && !holidays.contains(&s.day))
}

/// Shuffles with `seed` and puts `floor(n * ratio)` items in the training part.
/// Both parts keep the input's relative order.
pub fn train_test_split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::EmptyInput("nothing to split".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio {ratio} must lie in (0, 1)"
        )));
    }
    let n = items.len();
    // The epsilon keeps exact products such as 245 * 0.8 from flooring to 195.
    let n_train = ((n as f64) * ratio + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| items[i].clone()).collect(),
        test_idx.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

/// Uniform per-sample corruption: exactly `round(missing_rate * T)` intervals are hidden.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub missing_rate: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(missing_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&missing_rate) {
            return Err(Error::InvalidArgument(format!(
                "missing rate {missing_rate} must lie in [0, 1)"
            )));
        }
        Ok(Self { missing_rate, seed })
    }

    pub fn missing_count(&self, intervals: usize) -> usize {
        (self.missing_rate * intervals as f64).round() as usize
    }
}

/// Hides `spec.missing_count(T)` uniformly chosen intervals of a complete day.
/// Hidden values are zeroed; the caller keeps the input as ground truth.
pub fn corrupt(series: &DailySeries, spec: &CorruptionSpec) -> Result<DailySeries> {
    let spec = CorruptionSpec::new(spec.missing_rate, spec.seed)?;
    if !series.is_fully_observed() {
        return Err(Error::InvalidArgument(format!(
            "sensor {} day {} is not fully observed and cannot be corrupted",
            series.sensor_id, series.day
        )));
    }
    let mut out = series.clone();
    let n_missing = spec.missing_count(series.len());
    let mut r = rng::seeded(spec.seed);
    for t in index::sample(&mut r, series.len(), n_missing) {
        out.mask[t] = false;
        out.values[t] = 0.0;
    }
    Ok(out)
}
