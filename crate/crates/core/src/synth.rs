//! Seeded synthetic traffic days built from Gaussian peaks over a base level.

use chrono::{Days, NaiveDate};
use rand::Rng as _;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::data::DailySeries;
use crate::error::{Error, Result};
use crate::rng::{derive_index_seed, derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub center_hour: f64,
    pub width_hours: f64,
    /// Height above base, in vehicles per 5 minutes.
    pub amplitude: f64,
}

/// Shape of a sensor's typical day plus the day-to-day variation around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyProfile {
    /// Flow floor in vehicles per 5 minutes.
    pub base: f64,
    pub peaks: Vec<Peak>,
    /// Each peak's amplitude is scaled by a factor drawn from `1 ± amplitude_jitter`.
    pub amplitude_jitter: f64,
    /// Each peak's center shifts by up to this many minutes either way.
    pub phase_jitter_minutes: f64,
    /// Log-scale sigma of the per-interval multiplicative noise.
    pub noise_sigma: f64,
}

impl DailyProfile {
    /// Commuter pattern: morning peak near 08:00 and a broader evening peak near 17:00.
    pub fn two_peak() -> Self {
        Self {
            base: 15.0,
            peaks: vec![
                Peak {
                    center_hour: 8.0,
                    width_hours: 1.25,
                    amplitude: 90.0,
                },
                Peak {
                    center_hour: 17.0,
                    width_hours: 1.75,
                    amplitude: 110.0,
                },
            ],
            amplitude_jitter: 0.25,
            phase_jitter_minutes: 45.0,
            noise_sigma: 0.05,
        }
    }

    /// Expected 5-minute rate at `hour` with per-peak scale and shift applied.
    fn rate(&self, hour: f64, scales: &[f64], shifts: &[f64]) -> f64 {
        self.base
            + self
                .peaks
                .iter()
                .zip(scales.iter().zip(shifts))
                .map(|(p, (s, d))| {
                    let u = (hour - p.center_hour - d) / p.width_hours;
                    s * p.amplitude * (-0.5 * u * u).exp()
                })
                .sum::<f64>()
    }

    /// Noise-free mean day at `intervals` resolution, in counts per interval.
    pub fn mean_day(&self, intervals: usize) -> Vec<f64> {
        let ones = vec![1.0; self.peaks.len()];
        let zeros = vec![0.0; self.peaks.len()];
        let scale = 288.0 / intervals as f64;
        (0..intervals)
            .map(|t| scale * self.rate(hour_of(t, intervals), &ones, &zeros))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let ok = self.base >= 0.0
            && (0.0..1.0).contains(&self.amplitude_jitter)
            && self.phase_jitter_minutes >= 0.0
            && self.noise_sigma >= 0.0
            && self
                .peaks
                .iter()
                .all(|p| p.width_hours > 0.0 && p.amplitude >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid synthetic profile {self:?}"
            )))
        }
    }
}

fn hour_of(t: usize, intervals: usize) -> f64 {
    // Interval midpoint.
    (t as f64 + 0.5) * 24.0 / intervals as f64
}

/// `days` consecutive complete days starting at `start`, rounded to whole counts.
pub fn generate_days(
    profile: &DailyProfile,
    sensor_id: &str,
    start: NaiveDate,
    days: usize,
    intervals: usize,
    seed: u64,
) -> Result<Vec<DailySeries>> {
    profile.validate()?;
    if intervals == 0 || 1440 % intervals != 0 {
        return Err(Error::InvalidArgument(format!(
            "{intervals} intervals do not divide a day"
        )));
    }
    let noise = LogNormal::new(0.0, profile.noise_sigma).expect("validated sigma");
    let scale = 288.0 / intervals as f64;
    let base_seed = derive_seed(seed, sensor_id);
    (0..days)
        .map(|d| {
            let mut rng = seeded(derive_index_seed(base_seed, d as u64));
            let j = profile.amplitude_jitter;
            let scales: Vec<f64> = profile
                .peaks
                .iter()
                .map(|_| {
                    if j > 0.0 {
                        rng.random_range(1.0 - j..=1.0 + j)
                    } else {
                        1.0
                    }
                })
                .collect();
            let pj = profile.phase_jitter_minutes / 60.0;
            let shifts: Vec<f64> = profile
                .peaks
                .iter()
                .map(|_| {
                    if pj > 0.0 {
                        rng.random_range(-pj..=pj)
                    } else {
                        0.0
                    }
                })
                .collect();
            let values = (0..intervals)
                .map(|t| {
                    let mean = scale * profile.rate(hour_of(t, intervals), &scales, &shifts);
                    (mean * noise.sample(&mut rng)).round().max(0.0)
                })
                .collect();
            let day = start
                .checked_add_days(Days::new(d as u64))
                .ok_or_else(|| Error::InvalidArgument("date overflow".into()))?;
            DailySeries::complete(sensor_id, day, values)
        })
        .collect()
}

/// Three clearly distinct daily patterns used for clustering checks:
/// morning-heavy, evening-heavy and a low single midday hump.
pub fn pattern_group(group: usize) -> DailyProfile {
    let peak = |center_hour, width_hours, amplitude| Peak {
        center_hour,
        width_hours,
        amplitude,
    };
    let peaks = match group % 3 {
        0 => vec![peak(7.5, 1.0, 160.0), peak(17.0, 1.5, 40.0)],
        1 => vec![peak(8.0, 1.0, 30.0), peak(17.5, 1.25, 170.0)],
        _ => vec![peak(13.0, 3.0, 60.0)],
    };
    DailyProfile {
        base: if group % 3 == 2 { 5.0 } else { 20.0 },
        peaks,
        amplitude_jitter: 0.15,
        phase_jitter_minutes: 20.0,
        noise_sigma: 0.05,
    }
}

/// Sensors drawn from [`pattern_group`] profiles with per-sensor amplitude
/// variation. Returns `(sensor_id, days, planted group)` per sensor.
pub fn planted_sensors(
    groups: usize,
    sensors_per_group: usize,
    start: NaiveDate,
    days: usize,
    intervals: usize,
    seed: u64,
) -> Result<Vec<(String, Vec<DailySeries>, usize)>> {
    let mut out = Vec::with_capacity(groups * sensors_per_group);
    for g in 0..groups {
        for k in 0..sensors_per_group {
            let id = format!("g{g}s{k:02}");
            let mut rng = seeded(derive_seed(seed, &id));
            let mut profile = pattern_group(g);
            let level = rng.random_range(0.85..=1.15);
            profile.base *= level;
            profile.peaks.iter_mut().for_each(|p| p.amplitude *= level);
            out.push((
                id.clone(),
                generate_days(&profile, &id, start, days, intervals, seed)?,
                g,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2013, 1, 1).unwrap()
    }

    #[test]
    fn days_are_complete_counts_and_deterministic() {
        let p = DailyProfile::two_peak();
        let a = generate_days(&p, "s1", start(), 5, 72, 9).unwrap();
        let b = generate_days(&p, "s1", start(), 5, 72, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_eq!(a[4].day, NaiveDate::from_ymd_opt(2013, 1, 5).unwrap());
        for s in &a {
            assert_eq!(s.len(), 72);
            assert!(s.is_fully_observed());
            assert!(s.values.iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        }
        assert_ne!(a[0].values, a[1].values);
    }

    #[test]
    fn peaks_sit_near_commute_hours() {
        let m = DailyProfile::two_peak().mean_day(288);
        let argmax =
            |lo: usize, hi: usize| (lo..hi).max_by(|&i, &j| m[i].total_cmp(&m[j])).unwrap();
        assert!((92..=100).contains(&argmax(0, 144)), "{}", argmax(0, 144));
        assert!((200..=208).contains(&argmax(144, 288)));
    }

    #[test]
    fn planted_groups_are_labelled() {
        let s = planted_sensors(3, 2, start(), 3, 24, 1).unwrap();
        let labels: Vec<usize> = s.iter().map(|x| x.2).collect();
        assert_eq!(labels, vec![0, 0, 1, 1, 2, 2]);
    }
}
