//! Latent-space search: find the generated day that best overlays the observed
//! points of a corrupted day, then fill its gaps from that day.
//!
//! The loss is the mean absolute difference between the decoded generator
//! diagonal and the normalized observations. With `d` the diagonal entry,
//! the decoded value is `x = sqrt((d + 1) / 2)` and `dx/dd = 1 / (4x)`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DailySeries;
use crate::error::{Error, Result};
use crate::gasf::{self, PreprocessStats};
use crate::model::Generator;
use crate::nn::{self, Mode, Tensor};
use crate::rng::{derive_index_seed, seeded};

/// Lower bound on the decoded value inside `1 / (4x)`.
const DECODE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentSearchConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for LatentSearchConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            step_size: 10.0,
            restarts: 3,
            seed: 0,
        }
    }
}

impl LatentSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "iterations and restarts must be at least 1".into(),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step size {} must be positive",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// A corrupted day prepared for comparison with generator output.
struct Target {
    normalized: Vec<f64>,
    mask: Vec<bool>,
    observed: usize,
    pad: usize,
}

impl Target {
    fn new(
        corrupted: &DailySeries,
        generator: &Generator,
        stats: &PreprocessStats,
    ) -> Result<Self> {
        let observed = corrupted.observed_count();
        if observed == 0 {
            return Err(Error::Unsupported(format!(
                "sensor {} day {} has no observed interval",
                corrupted.sensor_id, corrupted.day
            )));
        }
        let side = corrupted.len() + 2 * stats.pad;
        if generator.output_size() != side {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "generator side {side} for {} intervals and pad {}",
                    corrupted.len(),
                    stats.pad
                ),
                actual: format!("generator side {}", generator.output_size()),
            });
        }
        let normalized = corrupted
            .values
            .iter()
            .zip(&corrupted.mask)
            .map(|(&v, &m)| if m { stats.normalize(v) } else { 0.0 })
            .collect();
        Ok(Self {
            normalized,
            mask: corrupted.mask.clone(),
            observed,
            pad: stats.pad,
        })
    }

    fn decoded(&self, image: &[f64], side: usize) -> Vec<f64> {
        (0..self.mask.len())
            .map(|t| {
                let k = t + self.pad;
                gasf::diagonal_to_value(image[k * side + k])
            })
            .collect()
    }

    fn loss(&self, decoded: &[f64]) -> f64 {
        let sum: f64 = decoded
            .iter()
            .zip(&self.normalized)
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|((x, y), _)| (x - y).abs())
            .sum();
        sum / self.observed as f64
    }

    /// Loss and its gradient with respect to the image entries (diagonal only).
    fn loss_and_image_grad(&self, image: &[f64], side: usize, dimage: &mut [f64]) -> f64 {
        let decoded = self.decoded(image, side);
        let inv = 1.0 / self.observed as f64;
        for (t, x) in decoded.iter().enumerate() {
            if !self.mask[t] {
                continue;
            }
            let r = x - self.normalized[t];
            let sign = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            let k = t + self.pad;
            dimage[k * side + k] = sign * inv / (4.0 * x.max(DECODE_FLOOR));
        }
        self.loss(&decoded)
    }
}

/// Losses for a batch of latent rows, plus gradients when `grads` is set.
fn evaluate(
    generator: &Generator,
    target: &Target,
    z: &[f64],
    n: usize,
    grads: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let (out, tape) = generator.forward(z, n, Mode::Eval);
    let side = out.h;
    let mut dout = Tensor::zeros(n, 1, side, side);
    let plane = side * side;
    let losses: Vec<f64> = (0..n)
        .map(|i| {
            target.loss_and_image_grad(
                out.sample(i),
                side,
                &mut dout.data[i * plane..(i + 1) * plane],
            )
        })
        .collect();
    let dz = grads.then(|| generator.backward(&tape, &dout, false).0);
    (losses, dz)
}

/// Masked reconstruction loss of `generator(z)` against the observed entries of `corrupted`.
pub fn masked_loss(
    z: &[f64],
    corrupted: &DailySeries,
    generator: &Generator,
    stats: &PreprocessStats,
) -> Result<f64> {
    check_latent(z, generator)?;
    let target = Target::new(corrupted, generator, stats)?;
    Ok(evaluate(generator, &target, z, 1, false).0[0])
}

/// Masked loss and its gradient with respect to `z`.
pub fn masked_loss_grad(
    z: &[f64],
    corrupted: &DailySeries,
    generator: &Generator,
    stats: &PreprocessStats,
) -> Result<(f64, Vec<f64>)> {
    check_latent(z, generator)?;
    let target = Target::new(corrupted, generator, stats)?;
    let (l, g) = evaluate(generator, &target, z, 1, true);
    Ok((l[0], g.expect("requested")))
}

fn check_latent(z: &[f64], generator: &Generator) -> Result<()> {
    if z.len() != generator.latent_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("latent vector of length {}", generator.latent_dim()),
            actual: format!("length {}", z.len()),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Number of gradient steps taken before reaching `best_loss`.
    pub best_iteration: usize,
    pub steps_taken: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub z_best: Vec<f64>,
    pub loss_best: f64,
    pub restart_index: usize,
    pub restarts: Vec<RestartSummary>,
    /// Latent rows after the last step, one per restart.
    pub final_z: Vec<Vec<f64>>,
}

/// Gradient descent on `z` with the generator frozen; best iterate across all
/// restarts and steps (including the starting points) is returned.
pub fn find_latent(
    corrupted: &DailySeries,
    generator: &Generator,
    stats: &PreprocessStats,
    cfg: &LatentSearchConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let target = Target::new(corrupted, generator, stats)?;
    let dim = generator.latent_dim();
    let r = cfg.restarts;
    let mut z = nn::standard_normal(r, dim, &mut seeded(cfg.seed));
    let mut alive = vec![true; r];
    let mut summaries = vec![
        RestartSummary {
            initial_loss: f64::NAN,
            best_loss: f64::INFINITY,
            best_iteration: 0,
            steps_taken: 0,
            failed: false,
        };
        r
    ];
    let mut best: Vec<Vec<f64>> = vec![Vec::new(); r];
    for step in 0..=cfg.iterations {
        let last = step == cfg.iterations;
        let (losses, dz) = evaluate(generator, &target, &z, r, !last);
        for i in 0..r {
            if !alive[i] {
                continue;
            }
            let loss = losses[i];
            let row = &mut z[i * dim..(i + 1) * dim];
            let grad = dz.as_ref().map(|g| &g[i * dim..(i + 1) * dim]);
            if !loss.is_finite() || grad.is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                log::warn!("restart {i} aborted at step {step}: non-finite loss or gradient");
                alive[i] = false;
                summaries[i].failed = true;
                continue;
            }
            let s = &mut summaries[i];
            if step == 0 {
                s.initial_loss = loss;
            }
            if loss < s.best_loss {
                s.best_loss = loss;
                s.best_iteration = step;
                best[i] = row.to_vec();
            }
            if let Some(g) = grad {
                row.iter_mut()
                    .zip(g)
                    .for_each(|(v, d)| *v -= cfg.step_size * d);
                s.steps_taken += 1;
            }
        }
    }
    let winner = (0..r)
        .filter(|&i| !best[i].is_empty())
        .min_by(|&a, &b| summaries[a].best_loss.total_cmp(&summaries[b].best_loss))
        .ok_or(Error::AllRestartsFailed(r))?;
    Ok(SearchOutcome {
        z_best: best[winner].clone(),
        loss_best: summaries[winner].best_loss,
        restart_index: winner,
        restarts: summaries,
        final_z: z.chunks(dim).map(<[f64]>::to_vec).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    /// Blended day; every interval is marked observed.
    pub imputed: DailySeries,
    /// Input mask, kept to tell observed from filled intervals.
    pub input_mask: Vec<bool>,
    /// Decoded generator day in raw units.
    pub synthetic: Vec<f64>,
    pub z_best: Vec<f64>,
    pub loss_best: f64,
    pub iterations_used: usize,
    pub restart_index: usize,
    pub restarts: Vec<RestartSummary>,
}

/// Decoded raw-unit day for a latent vector.
pub fn synthesize(
    z: &[f64],
    generator: &Generator,
    stats: &PreprocessStats,
    intervals: usize,
) -> Result<Vec<f64>> {
    check_latent(z, generator)?;
    let img = generator.generate(z, 1);
    let side = img.h;
    Ok((0..intervals)
        .map(|t| {
            let k = t + stats.pad;
            stats.restore(gasf::diagonal_to_value(img.data[k * side + k]))
        })
        .collect())
}

/// Fills the unobserved intervals of `corrupted`; observed values pass through unchanged.
pub fn impute(
    corrupted: &DailySeries,
    generator: &Generator,
    stats: &PreprocessStats,
    cfg: &LatentSearchConfig,
) -> Result<ImputationResult> {
    let outcome = find_latent(corrupted, generator, stats, cfg)?;
    let synthetic = synthesize(&outcome.z_best, generator, stats, corrupted.len())?;
    let values = corrupted
        .values
        .iter()
        .zip(&corrupted.mask)
        .zip(&synthetic)
        .map(|((&v, &m), &s)| if m { v } else { s })
        .collect();
    let imputed = DailySeries::complete(corrupted.sensor_id.clone(), corrupted.day, values)?;
    Ok(ImputationResult {
        imputed,
        input_mask: corrupted.mask.clone(),
        synthetic,
        z_best: outcome.z_best,
        loss_best: outcome.loss_best,
        iterations_used: outcome.restarts[outcome.restart_index].steps_taken,
        restart_index: outcome.restart_index,
        restarts: outcome.restarts,
    })
}

/// Imputes every sample independently (in parallel); sample `i` searches with
/// seed `derive_index_seed(cfg.seed, i)`. Failures stay in their slot.
pub fn impute_batch(
    samples: &[DailySeries],
    generator: &Generator,
    stats: &PreprocessStats,
    cfg: &LatentSearchConfig,
) -> Result<Vec<Result<ImputationResult>>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to impute".into()));
    }
    cfg.validate()?;
    Ok(samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = LatentSearchConfig {
                seed: derive_index_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            impute(s, generator, stats, &cfg)
        })
        .collect())
}

/// Long-format CSV: `sensor_id,day,t,observed_flag,value,source`.
pub fn write_results_csv<'a>(
    path: &Path,
    results: impl IntoIterator<Item = &'a ImputationResult>,
) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["sensor_id", "day", "t", "observed_flag", "value", "source"])
        .map_err(io)?;
    for r in results {
        let day = r.imputed.day.to_string();
        for (t, (&v, &m)) in r.imputed.values.iter().zip(&r.input_mask).enumerate() {
            w.write_record([
                r.imputed.sensor_id.as_str(),
                day.as_str(),
                &t.to_string(),
                if m { "1" } else { "0" },
                &v.to_string(),
                if m { "observed" } else { "imputed" },
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct ResultSummary<'a> {
    sensor_id: &'a str,
    day: String,
    loss_best: f64,
    iterations: usize,
    restart_index: usize,
    restarts: &'a [RestartSummary],
}

pub fn write_summary_json<'a>(
    path: &Path,
    results: impl IntoIterator<Item = &'a ImputationResult>,
) -> Result<()> {
    let rows: Vec<ResultSummary> = results
        .into_iter()
        .map(|r| ResultSummary {
            sensor_id: &r.imputed.sensor_id,
            day: r.imputed.day.to_string(),
            loss_best: r.loss_best,
            iterations: r.iterations_used,
            restart_index: r.restart_index,
            restarts: &r.restarts,
        })
        .collect();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &rows)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GeneratorSpec;
    use chrono::NaiveDate;

    const T: usize = 10;

    fn setup() -> (Generator, PreprocessStats) {
        let spec = GeneratorSpec {
            latent_dim: 6,
            channels: vec![6, 4],
            output_size: T + 2,
            seed_side: None,
        };
        let g = Generator::new(spec, &mut seeded(11)).unwrap();
        (g, PreprocessStats::new(0.0, 6.0, 1).unwrap())
    }

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2013, 5, 6).unwrap()
    }

    /// A day whose observed values are exactly the generator's decoded output for `z`.
    fn planted(g: &Generator, stats: &PreprocessStats, z: &[f64], mask: Vec<bool>) -> DailySeries {
        let raw = synthesize(z, g, stats, T).unwrap();
        let values = raw
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        DailySeries::new("s", day(), values, mask).unwrap()
    }

    #[test]
    fn exact_overlay_has_zero_loss() {
        let (g, stats) = setup();
        let z = nn::standard_normal(1, 6, &mut seeded(1));
        let s = planted(&g, &stats, &z, vec![true; T]);
        assert!(masked_loss(&z, &s, &g, &stats).unwrap() < 1e-12);
    }

    #[test]
    fn all_missing_is_unsupported() {
        let (g, stats) = setup();
        let s = DailySeries::new("s", day(), vec![0.0; T], vec![false; T]).unwrap();
        let z = vec![0.0; 6];
        assert!(matches!(
            masked_loss(&z, &s, &g, &stats),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            impute(&s, &g, &stats, &LatentSearchConfig::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn one_iteration_applies_exactly_one_step() {
        let (g, stats) = setup();
        let z0 = nn::standard_normal(1, 6, &mut seeded(2));
        let mut mask = vec![true; T];
        mask[3] = false;
        let s = planted(&g, &stats, &z0, mask);
        let cfg = LatentSearchConfig {
            iterations: 1,
            restarts: 1,
            step_size: 0.5,
            seed: 77,
        };
        let start = nn::standard_normal(1, 6, &mut seeded(77));
        let (_, grad) = masked_loss_grad(&start, &s, &g, &stats).unwrap();
        let out = find_latent(&s, &g, &stats, &cfg).unwrap();
        assert_eq!(out.restarts[0].steps_taken, 1);
        for k in 0..6 {
            assert!((out.final_z[0][k] - (start[k] - 0.5 * grad[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn search_is_deterministic_and_never_worse_than_start() {
        let (g, stats) = setup();
        let z0 = nn::standard_normal(1, 6, &mut seeded(3));
        let mut mask = vec![true; T];
        mask[0] = false;
        mask[7] = false;
        let s = planted(&g, &stats, &z0, mask);
        let cfg = LatentSearchConfig {
            iterations: 20,
            ..Default::default()
        };
        let a = find_latent(&s, &g, &stats, &cfg).unwrap();
        let b = find_latent(&s, &g, &stats, &cfg).unwrap();
        assert_eq!(a.z_best, b.z_best);
        for r in &a.restarts {
            assert!(r.best_loss <= r.initial_loss);
        }
        assert!(a.loss_best.is_finite() && a.loss_best >= 0.0);
    }

    #[test]
    fn full_mask_returns_input_and_pass_through_holds() {
        let (g, stats) = setup();
        let values: Vec<f64> = (0..T).map(|t| (t * 7 % 11) as f64).collect();
        let full = DailySeries::complete("s", day(), values.clone()).unwrap();
        let cfg = LatentSearchConfig {
            iterations: 3,
            ..Default::default()
        };
        let r = impute(&full, &g, &stats, &cfg).unwrap();
        assert_eq!(r.imputed.values, values);
        assert!(r.loss_best.is_finite());

        let mut mask = vec![true; T];
        mask[2] = false;
        mask[5] = false;
        let part = DailySeries::new(
            "s",
            day(),
            values
                .iter()
                .zip(&mask)
                .map(|(v, m)| if *m { *v } else { 0.0 })
                .collect(),
            mask.clone(),
        )
        .unwrap();
        let r = impute(&part, &g, &stats, &cfg).unwrap();
        for t in 0..T {
            if mask[t] {
                assert_eq!(r.imputed.values[t], values[t]);
            } else {
                assert!(r.imputed.values[t] >= 0.0);
            }
        }
        assert!(r.imputed.is_fully_observed());
    }

    #[test]
    fn batch_matches_sequential_calls() {
        let (g, stats) = setup();
        let cfg = LatentSearchConfig {
            iterations: 5,
            seed: 5,
            ..Default::default()
        };
        let samples: Vec<DailySeries> = (0..3)
            .map(|i| {
                let mut mask = vec![true; T];
                mask[i] = false;
                let v = (0..T)
                    .map(|t| ((t + i) % 5) as f64 + 1.0)
                    .collect::<Vec<_>>();
                DailySeries::new(
                    "s",
                    day(),
                    v.iter()
                        .zip(&mask)
                        .map(|(v, m)| if *m { *v } else { 0.0 })
                        .collect(),
                    mask,
                )
                .unwrap()
            })
            .collect();
        let batch = impute_batch(&samples, &g, &stats, &cfg).unwrap();
        for (i, r) in batch.iter().enumerate() {
            let seq = impute(
                &samples[i],
                &g,
                &stats,
                &LatentSearchConfig {
                    seed: derive_index_seed(5, i as u64),
                    ..cfg.clone()
                },
            )
            .unwrap();
            assert_eq!(r.as_ref().unwrap(), &seq);
        }
        assert!(impute_batch(&[], &g, &stats, &cfg).is_err());
        let single = impute_batch(&samples[..1], &g, &stats, &cfg).unwrap();
        assert_eq!(single[0].as_ref().unwrap(), batch[0].as_ref().unwrap());
    }

    #[test]
    fn csv_export_flags_sources() {
        let (g, stats) = setup();
        let mut mask = vec![true; T];
        mask[1] = false;
        let s = DailySeries::new(
            "s",
            day(),
            (0..T).map(|t| if t == 1 { 0.0 } else { 3.0 }).collect(),
            mask,
        )
        .unwrap();
        let r = impute(
            &s,
            &g,
            &stats,
            &LatentSearchConfig {
                iterations: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        write_results_csv(&p, [&r]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), T + 1);
        assert!(text.lines().nth(2).unwrap().contains(",1,0,"));
        assert!(text.lines().nth(2).unwrap().ends_with("imputed"));
        write_summary_json(&dir.path().join("s.json"), [&r]).unwrap();
    }
}
