//! Quantile features per sensor, k-means over them and elbow selection of K.
//!
//! A feature vector holds five blocks of length `T`: the 10th, 30th, 50th,
//! 70th and 90th percentile of the sensor's training days at each interval
//! (`vector[b * T + t]`). Percentiles interpolate linearly between order
//! statistics at rank `(n - 1) * q / 100`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{DailySeries, SensorDataset};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const QUANTILES: [f64; 5] = [10.0, 30.0, 50.0, 70.0, 90.0];
pub const MAX_LLOYD_ITERATIONS: usize = 300;
/// Below this, the normalized inertia curve is treated as having no elbow.
pub const ELBOW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFeature {
    pub sensor_id: String,
    pub vector: Vec<f64>,
}

/// Percentile `q` (0..=100) of ascending `sorted` data, linear interpolation.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Builds the quantile feature from complete days of one sensor.
pub fn features_from_days(sensor_id: &str, days: &[&DailySeries]) -> Result<SensorFeature> {
    let full: Vec<&DailySeries> = days
        .iter()
        .copied()
        .filter(|d| d.is_fully_observed())
        .collect();
    if full.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "sensor {sensor_id} has {} fully observed days, need at least 2",
            full.len()
        )));
    }
    let t_len = full[0].len();
    if full.iter().any(|d| d.len() != t_len) {
        return Err(Error::InvalidArgument(format!(
            "sensor {sensor_id} mixes day lengths"
        )));
    }
    let mut vector = vec![0.0; QUANTILES.len() * t_len];
    let mut column = Vec::with_capacity(full.len());
    for t in 0..t_len {
        column.clear();
        column.extend(full.iter().map(|d| d.values[t]));
        column.sort_by(f64::total_cmp);
        for (b, &q) in QUANTILES.iter().enumerate() {
            vector[b * t_len + t] = percentile(&column, q);
        }
    }
    Ok(SensorFeature {
        sensor_id: sensor_id.to_string(),
        vector,
    })
}

pub fn build_features(dataset: &SensorDataset) -> Result<SensorFeature> {
    let days: Vec<&DailySeries> = dataset.fully_observed.iter().collect();
    features_from_days(&dataset.sensor_id, &days)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub labels: BTreeMap<String, usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd update, starting with the seeded centroids.
    #[serde(skip)]
    pub inertia_history: Vec<f64>,
}

fn validate_features(features: &[SensorFeature]) -> Result<usize> {
    let first = features
        .first()
        .ok_or_else(|| Error::EmptyInput("no sensor features to cluster".into()))?;
    let len = first.vector.len();
    if let Some(bad) = features.iter().find(|f| f.vector.len() != len) {
        return Err(Error::ShapeMismatch {
            expected: format!("feature length {len}"),
            actual: format!("{} for sensor {}", bad.vector.len(), bad.sensor_id),
        });
    }
    Ok(len)
}

/// Adds centroids one at a time at the point farthest from its nearest centroid.
fn add_farthest(points: &[&[f64]], centroids: &mut Vec<Vec<f64>>, used: &mut [bool], k: usize) {
    while centroids.len() < k {
        let mut best = None::<(usize, f64)>;
        for (i, p) in points.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = nearest(centroids, p).1;
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k never exceeds the number of points");
        used[i] = true;
        centroids.push(points[i].to_vec());
    }
}

fn lloyd(
    points: &[&[f64]],
    mut centroids: Vec<Vec<f64>>,
) -> (Vec<Vec<f64>>, Vec<usize>, f64, Vec<f64>) {
    let k = centroids.len();
    let dim = points[0].len();
    let assign = |c: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let labels = points
            .iter()
            .map(|p| {
                let (i, d) = nearest(c, p);
                total += d;
                i
            })
            .collect();
        (labels, total)
    };
    let (mut labels, mut inertia) = assign(&centroids);
    let mut history = vec![inertia];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        // Empty clusters take the point worst served by its current centroid.
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let (far, _) = points
                .iter()
                .enumerate()
                .filter(|(i, _)| counts[labels[*i]] > 1)
                .map(|(i, p)| (i, sq_dist(p, &centroids[labels[i]])))
                .fold(
                    (usize::MAX, -1.0),
                    |best, (i, d)| if d > best.1 { (i, d) } else { best },
                );
            if far == usize::MAX {
                continue;
            }
            let old = labels[far];
            counts[old] -= 1;
            sums[old]
                .iter_mut()
                .zip(points[far].iter())
                .for_each(|(s, v)| *s -= v);
            labels[far] = j;
            counts[j] = 1;
            sums[j] = points[far].to_vec();
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (next, total) = assign(&centroids);
        history.push(total);
        let stable = next == labels;
        labels = next;
        inertia = total;
        if stable {
            break;
        }
    }
    (centroids, labels, inertia, history)
}

fn finish(
    features: &[SensorFeature],
    fit: (Vec<Vec<f64>>, Vec<usize>, f64, Vec<f64>),
) -> ClusterAssignment {
    let (centroids, labels, inertia, inertia_history) = fit;
    ClusterAssignment {
        k: centroids.len(),
        centroids,
        labels: features
            .iter()
            .map(|f| f.sensor_id.clone())
            .zip(labels)
            .collect(),
        inertia,
        inertia_history,
    }
}

/// Lloyd's k-means with farthest-point seeding from a seeded random first centroid.
pub fn kmeans_fit(features: &[SensorFeature], k: usize, seed: u64) -> Result<ClusterAssignment> {
    validate_features(features)?;
    if k < 1 || k > features.len() {
        return Err(Error::InvalidArgument(format!(
            "K = {k} must lie in [1, {}] (number of sensors)",
            features.len()
        )));
    }
    let points: Vec<&[f64]> = features.iter().map(|f| f.vector.as_slice()).collect();
    let first = seeded(seed).random_range(0..points.len());
    let mut used = vec![false; points.len()];
    used[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    add_farthest(&points, &mut centroids, &mut used, k);
    Ok(finish(features, lloyd(&points, centroids)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowResult {
    pub k_best: usize,
    /// Set when the curve has no point of positive curvature.
    pub no_elbow: bool,
    pub ks: Vec<usize>,
    pub inertias: Vec<f64>,
    pub fits: Vec<ClusterAssignment>,
}

/// Index of the largest second difference of the min-max normalized curve, or
/// `None` when no interior point bends by more than [`ELBOW_TOLERANCE`].
pub fn max_curvature(ks: &[usize], inertias: &[f64]) -> Option<usize> {
    let (lo, hi) = inertias
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if hi - lo <= 0.0 {
        return None;
    }
    let y: Vec<f64> = inertias.iter().map(|v| (v - lo) / (hi - lo)).collect();
    let span = (ks[ks.len() - 1] - ks[0]) as f64;
    let x: Vec<f64> = ks.iter().map(|&k| (k - ks[0]) as f64 / span).collect();
    // Divided differences scaled by the mean squared step; for evenly spaced
    // K this is exactly y[i-1] - 2 y[i] + y[i+1].
    let h = 1.0 / (ks.len() - 1) as f64;
    let mut best = None::<(usize, f64)>;
    for i in 1..ks.len() - 1 {
        let left = (y[i] - y[i - 1]) / (x[i] - x[i - 1]);
        let right = (y[i + 1] - y[i]) / (x[i + 1] - x[i]);
        let second = 2.0 * (right - left) / (x[i + 1] - x[i - 1]) * h * h;
        if second > ELBOW_TOLERANCE && best.is_none_or(|(_, b)| second > b) {
            best = Some((i, second));
        }
    }
    best.map(|(i, _)| i)
}

/// Fits every K in `k_range` and picks the elbow. Each fit after the first
/// starts from the previous centroids plus farthest points, so inertia never
/// increases along the sweep.
pub fn elbow_select(
    features: &[SensorFeature],
    k_range: &[usize],
    seed: u64,
) -> Result<ElbowResult> {
    if k_range.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "elbow selection needs at least 3 values of K, got {}",
            k_range.len()
        )));
    }
    if k_range.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "K range must be strictly increasing".into(),
        ));
    }
    let mut fits = vec![kmeans_fit(features, k_range[0], seed)?];
    let points: Vec<&[f64]> = features.iter().map(|f| f.vector.as_slice()).collect();
    for &k in &k_range[1..] {
        if k > features.len() {
            return Err(Error::InvalidArgument(format!(
                "K = {k} exceeds the number of sensors ({})",
                features.len()
            )));
        }
        let prev = fits.last().expect("first fit exists");
        let mut centroids = prev.centroids.clone();
        let mut used = vec![false; points.len()];
        for (i, p) in points.iter().enumerate() {
            used[i] = centroids.iter().any(|c| c.as_slice() == *p);
        }
        add_farthest(&points, &mut centroids, &mut used, k);
        fits.push(finish(features, lloyd(&points, centroids)));
    }
    let inertias: Vec<f64> = fits.iter().map(|f| f.inertia).collect();
    let choice = max_curvature(k_range, &inertias);
    if choice.is_none() {
        log::warn!("inertia curve has no distinct elbow; using the smallest K");
    }
    Ok(ElbowResult {
        k_best: k_range[choice.unwrap_or(0)],
        no_elbow: choice.is_none(),
        ks: k_range.to_vec(),
        inertias,
        fits,
    })
}

/// Stored label for known sensors, nearest centroid for a supplied feature.
pub fn route_sensor(
    sensor_id: &str,
    assignment: &ClusterAssignment,
    feature: Option<&[f64]>,
) -> Result<usize> {
    if let Some(&label) = assignment.labels.get(sensor_id) {
        return Ok(label);
    }
    match feature {
        Some(f) => {
            let len = assignment.centroids.first().map_or(0, Vec::len);
            if f.len() != len {
                return Err(Error::ShapeMismatch {
                    expected: format!("feature length {len}"),
                    actual: format!("{}", f.len()),
                });
            }
            Ok(nearest(&assignment.centroids, f).0)
        }
        None => Err(Error::UnknownSensor(sensor_id.to_string())),
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

pub const ASSIGNMENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentFile {
    schema: String,
    schema_version: u32,
    k: usize,
    inertia: f64,
    /// Centroid CSV, relative to the JSON document.
    centroids: PathBuf,
    labels: BTreeMap<String, usize>,
}

impl ClusterAssignment {
    /// Writes `path` (JSON) and a sibling `<stem>.centroids.csv` with one centroid per row.
    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("assignment");
        let name = PathBuf::from(format!("{stem}.centroids.csv"));
        let csv_path = path.with_file_name(&name);
        let io = |e: csv::Error| Error::io(&csv_path, e.into());
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&csv_path)
            .map_err(io)?;
        for c in &self.centroids {
            w.write_record(c.iter().map(|v| format!("{v:?}")))
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let doc = AssignmentFile {
            schema: "gasfgan.clusters".into(),
            schema_version: ASSIGNMENT_SCHEMA_VERSION,
            k: self.k,
            inertia: self.inertia,
            centroids: name,
            labels: self.labels.clone(),
        };
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &doc)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let doc: AssignmentFile = serde_json::from_reader(std::io::BufReader::new(f))?;
        if doc.schema_version != ASSIGNMENT_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "cluster assignment schema version {} is not supported",
                doc.schema_version
            )));
        }
        let csv_path = path.with_file_name(&doc.centroids);
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(&csv_path)
            .map_err(|e| Error::io(&csv_path, e.into()))?;
        let mut centroids = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::io(&csv_path, e.into()))?;
            let row = rec
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: csv_path.clone(),
                    line: i as u64 + 1,
                    message: e.to_string(),
                })?;
            centroids.push(row);
        }
        if centroids.len() != doc.k || doc.labels.values().any(|&l| l >= doc.k) {
            return Err(Error::InvalidArgument(format!(
                "assignment declares K = {} but has {} centroids or out-of-range labels",
                doc.k,
                centroids.len()
            )));
        }
        Ok(Self {
            k: doc.k,
            centroids,
            labels: doc.labels,
            inertia: doc.inertia,
            inertia_history: Vec::new(),
        })
    }
}

/// `k,inertia` rows for plotting the elbow curve.
pub fn write_inertia_csv(path: &Path, ks: &[usize], inertias: &[f64]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["k", "inertia"]).map_err(io)?;
    for (k, v) in ks.iter().zip(inertias) {
        w.write_record([k.to_string(), format!("{v:?}")])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
