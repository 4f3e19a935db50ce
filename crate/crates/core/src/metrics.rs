//! Error metrics over evaluated positions, realized missing rate and report aggregation.
//!
//! An evaluation mask flags the positions that are scored: intervals hidden
//! from the imputer whose ground truth is known. Observed positions pass
//! through unchanged and are never scored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DayClass;
use crate::error::{Error, Result};

fn check(truth: &[f64], imputed: &[f64], eval_mask: &[bool]) -> Result<usize> {
    if truth.len() != imputed.len() || truth.len() != eval_mask.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} entries in every argument", truth.len()),
            actual: format!("imputed {}, mask {}", imputed.len(), eval_mask.len()),
        });
    }
    let n = eval_mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "no positions flagged for evaluation".into(),
        ));
    }
    Ok(n)
}

fn flagged<'a>(
    truth: &'a [f64],
    imputed: &'a [f64],
    mask: &'a [bool],
) -> impl Iterator<Item = (f64, f64)> + 'a {
    truth
        .iter()
        .zip(imputed)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&y, &p), _)| (y, p))
}

pub fn mae(truth: &[f64], imputed: &[f64], eval_mask: &[bool]) -> Result<f64> {
    let n = check(truth, imputed, eval_mask)?;
    Ok(flagged(truth, imputed, eval_mask)
        .map(|(y, p)| (y - p).abs())
        .sum::<f64>()
        / n as f64)
}

pub fn rmse(truth: &[f64], imputed: &[f64], eval_mask: &[bool]) -> Result<f64> {
    let n = check(truth, imputed, eval_mask)?;
    Ok((flagged(truth, imputed, eval_mask)
        .map(|(y, p)| (y - p) * (y - p))
        .sum::<f64>()
        / n as f64)
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mre {
    pub value: f64,
    /// Flagged positions skipped because their truth is zero.
    pub excluded: usize,
}

/// Mean relative error over flagged positions with non-zero truth.
pub fn mre(truth: &[f64], imputed: &[f64], eval_mask: &[bool]) -> Result<Mre> {
    check(truth, imputed, eval_mask)?;
    let (mut sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for (y, p) in flagged(truth, imputed, eval_mask) {
        if y == 0.0 {
            excluded += 1;
        } else {
            sum += (y - p).abs() / y;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument(
            "every flagged truth is zero; MRE is undefined".into(),
        ));
    }
    Ok(Mre {
        value: sum / used as f64,
        excluded,
    })
}

/// Fraction of unobserved entries (mask `false`) across all samples.
pub fn realized_mr<M: AsRef<[bool]>>(masks: &[M]) -> Result<f64> {
    let total: usize = masks.iter().map(|m| m.as_ref().len()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("no masks".into()));
    }
    let missing: usize = masks
        .iter()
        .map(|m| m.as_ref().iter().filter(|&&v| !v).count())
        .sum();
    Ok(missing as f64 / total as f64)
}

/// Positions hidden from the imputer (`input_mask` false) whose truth is known.
pub fn eval_mask(input_mask: &[bool], truth_mask: &[bool]) -> Vec<bool> {
    input_mask
        .iter()
        .zip(truth_mask)
        .map(|(&i, &t)| !i && t)
        .collect()
}

/// Metrics for one (method, sensor, missing rate, repetition) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub sensor_id: String,
    pub cluster: Option<usize>,
    pub day_class: Option<DayClass>,
    pub missing_rate: f64,
    pub repetition: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mre: f64,
    pub mre_excluded: usize,
    /// Number of scored positions.
    pub evaluated: usize,
}

impl MetricRow {
    /// Scores pooled residuals of a set of days. When every flagged truth is
    /// zero the MRE is NaN and all flagged positions count as excluded.
    #[allow(clippy::too_many_arguments)]
    pub fn score(
        method: &str,
        sensor_id: &str,
        cluster: Option<usize>,
        missing_rate: f64,
        repetition: usize,
        truth: &[f64],
        imputed: &[f64],
        eval_mask: &[bool],
    ) -> Result<Self> {
        let mae = mae(truth, imputed, eval_mask)?;
        let evaluated = eval_mask.iter().filter(|&&v| v).count();
        let m = mre(truth, imputed, eval_mask).unwrap_or(Mre {
            value: f64::NAN,
            excluded: evaluated,
        });
        Ok(Self {
            method: method.to_string(),
            sensor_id: sensor_id.to_string(),
            cluster,
            day_class: None,
            missing_rate,
            repetition,
            mae,
            rmse: rmse(truth, imputed, eval_mask)?,
            mre: m.value,
            mre_excluded: m.excluded,
            evaluated,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Sensor,
    Cluster,
    MissingRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// NaN entries are skipped; with nothing left every field is NaN.
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                median: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median: if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            },
            min: v[0],
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub method: String,
    pub key: String,
    pub count: usize,
    pub mae: Summary,
    pub rmse: Summary,
    pub mre: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub group_by: GroupBy,
    pub repetitions: usize,
    pub rows: Vec<MetricRow>,
    pub groups: Vec<GroupAggregate>,
}

fn group_key(row: &MetricRow, by: GroupBy) -> (String, String) {
    let key = match by {
        GroupBy::Sensor => row.sensor_id.clone(),
        GroupBy::Cluster => row
            .cluster
            .map_or_else(|| "unassigned".into(), |c| c.to_string()),
        // Zero-padded so lexical order is numeric order.
        GroupBy::MissingRate => format!("{:06.4}", row.missing_rate),
    };
    (row.method.clone(), key)
}

/// Groups rows by method and `group_by`, with mean, median, min and max per metric.
pub fn aggregate_report(rows: Vec<MetricRow>, group_by: GroupBy) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("no metric rows to aggregate".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<&MetricRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry(group_key(r, group_by)).or_default().push(r);
    }
    let aggregates = groups
        .into_iter()
        .map(|((method, key), members)| {
            let pick = |f: fn(&MetricRow) -> f64| {
                Summary::of(&members.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            GroupAggregate {
                method,
                key,
                count: members.len(),
                mae: pick(|r| r.mae),
                rmse: pick(|r| r.rmse),
                mre: pick(|r| r.mre),
            }
        })
        .collect();
    let repetitions = rows.iter().map(|r| r.repetition).max().map_or(0, |m| m + 1);
    Ok(MetricsReport {
        group_by,
        repetitions,
        rows,
        groups: aggregates,
    })
}

impl MetricsReport {
    pub fn write_rows_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }

    /// One row per group with `<metric>_<statistic>` columns.
    pub fn write_groups_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Flat<'a> {
            method: &'a str,
            key: &'a str,
            count: usize,
            mae_mean: f64,
            mae_median: f64,
            mae_min: f64,
            mae_max: f64,
            rmse_mean: f64,
            rmse_median: f64,
            rmse_min: f64,
            rmse_max: f64,
            mre_mean: f64,
            mre_median: f64,
            mre_min: f64,
            mre_max: f64,
        }
        let flat: Vec<Flat> = self
            .groups
            .iter()
            .map(|g| Flat {
                method: &g.method,
                key: &g.key,
                count: g.count,
                mae_mean: g.mae.mean,
                mae_median: g.mae.median,
                mae_min: g.mae.min,
                mae_max: g.mae.max,
                rmse_mean: g.rmse.mean,
                rmse_median: g.rmse.median,
                rmse_min: g.rmse.min,
                rmse_max: g.rmse.max,
                mre_mean: g.mre.mean,
                mre_median: g.mre.median,
                mre_min: g.mre.min,
                mre_max: g.mre.max,
            })
            .collect();
        write_csv(path, &flat)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        let t = [10.0, 20.0];
        let p = [12.0, 17.0];
        let m = [true, true];
        assert_eq!(mae(&t, &p, &m).unwrap(), 2.5);
        assert!((rmse(&t, &p, &m).unwrap() - 6.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mre(&[10.0], &[12.0], &[true]).unwrap().value, 0.2);
        let z = mre(&[10.0, 0.0], &[12.0, 5.0], &[true, true]).unwrap();
        assert_eq!((z.value, z.excluded), (0.2, 1));
        assert_eq!(mae(&[3.0], &[10.0], &[true]).unwrap(), 7.0);
    }

    #[test]
    fn zero_flags_and_zero_truths_error() {
        assert!(mae(&[1.0], &[1.0], &[false]).is_err());
        assert!(rmse(&[1.0, 2.0], &[1.0], &[true, true]).is_err());
        assert!(mre(&[0.0], &[1.0], &[true]).is_err());
    }

    #[test]
    fn realized_missing_rate() {
        assert_eq!(realized_mr(&[vec![true; 4]]).unwrap(), 0.0);
        assert_eq!(realized_mr(&[vec![false; 4]]).unwrap(), 1.0);
        let m = [vec![true, false, true, true], vec![false, true, true, true]];
        assert_eq!(realized_mr(&m).unwrap(), 0.25);
    }

    fn row(sensor: &str, mae: f64) -> MetricRow {
        MetricRow {
            method: "gan".into(),
            sensor_id: sensor.into(),
            cluster: Some(0),
            day_class: Some(DayClass::Weekday),
            missing_rate: 0.2,
            repetition: 0,
            mae,
            rmse: mae,
            mre: mae / 100.0,
            mre_excluded: 0,
            evaluated: 1,
        }
    }

    #[test]
    fn aggregation() {
        let single = aggregate_report(vec![row("a", 3.0)], GroupBy::Sensor).unwrap();
        assert_eq!(
            single.groups[0].mae,
            Summary {
                mean: 3.0,
                median: 3.0,
                min: 3.0,
                max: 3.0
            }
        );
        let two = aggregate_report(vec![row("a", 1.0), row("b", 100.0)], GroupBy::Cluster).unwrap();
        assert_eq!(two.groups.len(), 1);
        assert_eq!(two.groups[0].mae.mean, 50.5);
        assert_eq!(two.groups[0].mae.median, 50.5);
        assert!(aggregate_report(vec![], GroupBy::Sensor).is_err());

        let mut rows: Vec<MetricRow> = (0..9).map(|i| row(&format!("s{i}"), 10.0)).collect();
        rows.push(row("x", 1000.0));
        rows.push(row("y", 2000.0));
        let r = aggregate_report(rows, GroupBy::Cluster).unwrap();
        assert_eq!(r.groups[0].mre.median, 0.1);
        assert!(r.groups[0].mre.mean > 2.0);
    }

    #[test]
    fn report_files_round_trip() {
        let r = aggregate_report(vec![row("a", 1.0), row("b", 2.0)], GroupBy::Sensor).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_rows_csv(&dir.path().join("rows.csv")).unwrap();
        r.write_groups_csv(&dir.path().join("groups.csv")).unwrap();
        r.write_json(&dir.path().join("report.json")).unwrap();
        assert_eq!(read_rows_csv(&dir.path().join("rows.csv")).unwrap(), r.rows);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn metric_laws(
            pairs in proptest::collection::vec((1.0f64..500.0, 0.0f64..500.0, any::<bool>()), 1..40),
            lambda in 0.1f64..10.0,
        ) {
            let t: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mut m: Vec<bool> = pairs.iter().map(|p| p.2).collect();
            m[0] = true;
            let (a, r, e) = (mae(&t, &p, &m).unwrap(), rmse(&t, &p, &m).unwrap(), mre(&t, &p, &m).unwrap().value);
            prop_assert!(a >= 0.0 && r >= 0.0 && e >= 0.0);
            prop_assert!(a <= r + 1e-12);
            let ts: Vec<f64> = t.iter().map(|v| v * lambda).collect();
            let ps: Vec<f64> = p.iter().map(|v| v * lambda).collect();
            prop_assert!((mae(&ts, &ps, &m).unwrap() - lambda * a).abs() <= 1e-9 * (1.0 + lambda * a));
            prop_assert!((rmse(&ts, &ps, &m).unwrap() - lambda * r).abs() <= 1e-9 * (1.0 + lambda * r));
            prop_assert!((mre(&ts, &ps, &m).unwrap().value - e).abs() <= 1e-9 * (1.0 + e));
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.reverse();
            let perm = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let pm: Vec<bool> = idx.iter().map(|&i| m[i]).collect();
            prop_assert!((mae(&perm(&t), &perm(&p), &pm).unwrap() - a).abs() < 1e-9);
        }
    }
}
