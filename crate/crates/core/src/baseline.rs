//! Reference imputers: same-day mean fill and historical average by time of day.

use crate::data::DailySeries;
use crate::error::{Error, Result};

fn fill(corrupted: &DailySeries, value_at: impl Fn(usize) -> f64) -> Result<DailySeries> {
    let values = corrupted
        .values
        .iter()
        .zip(&corrupted.mask)
        .enumerate()
        .map(|(t, (&v, &m))| if m { v } else { value_at(t) })
        .collect();
    DailySeries::complete(corrupted.sensor_id.clone(), corrupted.day, values)
}

/// Replaces every gap with the mean of the same day's observed values.
pub fn mean_fill(corrupted: &DailySeries) -> Result<DailySeries> {
    let observed: Vec<f64> = corrupted
        .values
        .iter()
        .zip(&corrupted.mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if observed.is_empty() {
        return Err(Error::Unsupported(format!(
            "sensor {} day {} has no observed interval",
            corrupted.sensor_id, corrupted.day
        )));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    fill(corrupted, |_| mean)
}

/// Per-interval mean of complete training days.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalAverage {
    pub profile: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit<'a>(days: impl IntoIterator<Item = &'a DailySeries>) -> Result<Self> {
        let mut sums: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for d in days.into_iter().filter(|d| d.is_fully_observed()) {
            if sums.is_empty() {
                sums = vec![0.0; d.len()];
            }
            if d.len() != sums.len() {
                return Err(Error::InvalidArgument(
                    "training days differ in length".into(),
                ));
            }
            sums.iter_mut().zip(&d.values).for_each(|(s, v)| *s += v);
            count += 1;
        }
        if count == 0 {
            return Err(Error::InsufficientData(
                "no complete training day for the historical average".into(),
            ));
        }
        Ok(Self {
            profile: sums.into_iter().map(|s| s / count as f64).collect(),
        })
    }

    pub fn impute(&self, corrupted: &DailySeries) -> Result<DailySeries> {
        if corrupted.len() != self.profile.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} intervals", self.profile.len()),
                actual: format!("{}", corrupted.len()),
            });
        }
        fill(corrupted, |t| self.profile[t])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn d(n: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2013, 2, n).unwrap()
    }

    #[test]
    fn mean_fill_uses_same_day_observations() {
        let s = DailySeries::new("s", d(1), vec![2.0, 0.0, 4.0], vec![true, false, true]).unwrap();
        assert_eq!(mean_fill(&s).unwrap().values, vec![2.0, 3.0, 4.0]);
        let empty = DailySeries::new("s", d(1), vec![0.0; 3], vec![false; 3]).unwrap();
        assert!(mean_fill(&empty).is_err());
    }

    #[test]
    fn historical_average_by_interval() {
        let a = DailySeries::complete("s", d(1), vec![1.0, 10.0]).unwrap();
        let b = DailySeries::complete("s", d(2), vec![3.0, 20.0]).unwrap();
        let ha = HistoricalAverage::fit([&a, &b]).unwrap();
        assert_eq!(ha.profile, vec![2.0, 15.0]);
        let c = DailySeries::new("s", d(3), vec![0.0, 7.0], vec![false, true]).unwrap();
        assert_eq!(ha.impute(&c).unwrap().values, vec![2.0, 7.0]);
    }
}
