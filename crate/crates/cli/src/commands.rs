//! The pipeline verbs. Each takes a validated [`RunConfig`] and reads or writes
//! artifacts under the output root (see [`crate::layout`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use gasfgan::baseline::{mean_fill, HistoricalAverage};
use gasfgan::cluster::{
    elbow_select, features_from_days, kmeans_fit, route_sensor, write_inertia_csv,
    ClusterAssignment,
};
use gasfgan::data::{
    self, corrupt, split_day_classes_with_holidays, train_test_split, CorruptionSpec,
};
use gasfgan::impute::{impute_batch, write_results_csv, write_summary_json};
use gasfgan::metrics::{aggregate_report, read_rows_csv, spearman, GroupBy, MetricRow};
use gasfgan::rng::{derive_index_seed, derive_seed, seeded};
use gasfgan::synth::planted_sensors;
use gasfgan::train::{training_images, Trainer};
use gasfgan::{
    DailySeries, DayClass, Discriminator, Error, Generator, LatentSearchConfig, ModelCheckpoint,
    PreprocessStats, SensorDataset, TrainLog,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::layout::{exists, sensor_stem, Layout};
use crate::plot::{line_chart, Series};
use crate::{io_err, read_json, write_json, CliError};

pub struct Context {
    pub config: RunConfig,
    pub layout: Layout,
}

impl Context {
    pub fn new(config: RunConfig) -> Self {
        let layout = Layout::new(config.output_dir.clone());
        Self { config, layout }
    }

    fn seed(&self, component: &str) -> u64 {
        derive_seed(self.config.seed, component)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sensor_id: String,
    pub stem: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSummary {
    pub sensor_id: String,
    pub days: usize,
    pub fully_observed_days: usize,
    pub partial_days: usize,
    pub weekday_days: usize,
    pub nonweekday_days: usize,
    /// Mean over loaded days of the fraction of missing intervals.
    pub missing_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub intervals: usize,
    pub sensors: Vec<SensorSummary>,
}

/// Writes a CSV of planted-pattern sensors for trying the pipeline out.
/// A `gappy_fraction` of days lose 30% of their intervals.
pub fn cmd_synth(
    out: &Path,
    groups: usize,
    per_group: usize,
    days: usize,
    intervals: usize,
    gappy_fraction: f64,
    seed: u64,
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&gappy_fraction) {
        return Err(CliError::Config(format!(
            "gappy fraction {gappy_fraction} must lie in [0, 1]"
        )));
    }
    let start = NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date");
    let sensors = planted_sensors(groups, per_group, start, days, intervals, seed)?;
    let mut rng = seeded(derive_seed(seed, "synth.gaps"));
    let mut all = Vec::new();
    for (_, series, _) in sensors {
        for (i, d) in series.into_iter().enumerate() {
            if rand::Rng::random_bool(&mut rng, gappy_fraction) {
                let spec = CorruptionSpec::new(0.3, derive_index_seed(seed, i as u64))?;
                all.push(corrupt(&d, &spec)?);
            } else {
                all.push(d);
            }
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    data::write_csv(out, &all)?;
    info!("wrote {} sensor-days to {}", all.len(), out.display());
    Ok(())
}

pub fn cmd_ingest(ctx: &Context) -> Result<IngestSummary, CliError> {
    let cfg = &ctx.config;
    let t = cfg.data.intervals;
    let mut merged: BTreeMap<String, BTreeMap<NaiveDate, DailySeries>> = BTreeMap::new();
    for path in &cfg.data.csv {
        for (id, days) in data::load_csv(path, t)? {
            let entry = merged.entry(id.clone()).or_default();
            for d in days {
                if entry.contains_key(&d.day) {
                    return Err(CliError::Data(format!(
                        "sensor {id} has rows for {} in more than one input file (latest: {})",
                        d.day,
                        path.display()
                    )));
                }
                entry.insert(d.day, d);
            }
        }
    }
    if merged.is_empty() {
        return Err(Error::EmptyInput("input files contain no sensor days".into()).into());
    }

    let datasets = ctx.layout.datasets();
    if exists(&datasets) {
        fs::remove_dir_all(&datasets).map_err(|e| io_err(&datasets, e))?;
    }
    let holidays = cfg.holidays();
    let mut index = Vec::new();
    let mut summary = Vec::new();
    let mut stems = BTreeSet::new();
    for (id, days) in merged {
        let stem = sensor_stem(&id);
        if !stems.insert(stem.clone()) {
            return Err(CliError::Data(format!(
                "sensor id {id} collides with another id after path sanitizing"
            )));
        }
        let series: Vec<DailySeries> = days.into_values().collect();
        let missing_fraction = series
            .iter()
            .map(DailySeries::missing_fraction)
            .sum::<f64>()
            / series.len() as f64;
        let full = series.iter().filter(|s| s.is_fully_observed()).count();
        let n = series.len();
        let (weekday, nonweekday) = split_day_classes_with_holidays(series, &holidays);
        summary.push(SensorSummary {
            sensor_id: id.clone(),
            days: n,
            fully_observed_days: full,
            partial_days: n - full,
            weekday_days: weekday.len(),
            nonweekday_days: nonweekday.len(),
            missing_fraction,
        });
        for (class, part) in [
            (DayClass::Weekday, weekday),
            (DayClass::NonWeekday, nonweekday),
        ] {
            let ds = SensorDataset::from_series(id.clone(), class, part)?;
            let path = ctx.layout.dataset(&stem, class);
            fs::create_dir_all(path.parent().expect("dataset path has a parent"))
                .map_err(|e| io_err(&path, e))?;
            ds.save(&path)?;
        }
        index.push(IndexEntry {
            sensor_id: id,
            stem,
        });
    }
    write_json(&ctx.layout.dataset_index(), &index)?;
    let summary = IngestSummary {
        intervals: t,
        sensors: summary,
    };
    write_json(&ctx.layout.ingest_summary(), &summary)?;
    info!(
        "ingested {} sensors into {}",
        index.len(),
        datasets.display()
    );
    Ok(summary)
}

fn load_index(ctx: &Context) -> Result<Vec<IndexEntry>, CliError> {
    let p = ctx.layout.dataset_index();
    if !exists(&p) {
        return Err(CliError::Data(format!(
            "no ingested datasets at {}; run `gasfgan ingest` first",
            p.display()
        )));
    }
    read_json(&p)
}

fn load_dataset(
    ctx: &Context,
    entry: &IndexEntry,
    class: DayClass,
) -> Result<SensorDataset, CliError> {
    Ok(SensorDataset::load(
        &ctx.layout.dataset(&entry.stem, class),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowFile {
    /// `elbow`, `override` or `too-few-sensors`.
    pub method: String,
    pub k: usize,
    pub no_elbow: bool,
    pub ks: Vec<usize>,
    pub inertias: Vec<f64>,
    /// Sensors without enough complete days to be clustered.
    pub skipped_sensors: Vec<String>,
}

pub fn cmd_cluster(ctx: &Context, k_override: Option<usize>) -> Result<ElbowFile, CliError> {
    let index = load_index(ctx)?;
    let mut features = Vec::new();
    let mut skipped = Vec::new();
    for entry in &index {
        let mut days = Vec::new();
        for class in DayClass::ALL {
            days.extend(load_dataset(ctx, entry, class)?.fully_observed);
        }
        match features_from_days(&entry.sensor_id, &days.iter().collect::<Vec<_>>()) {
            Ok(f) => features.push(f),
            Err(Error::InsufficientData(msg)) => {
                warn!("not clustered: {msg}");
                skipped.push(entry.sensor_id.clone());
            }
            Err(e) => return Err(e.into()),
        }
    }
    if features.is_empty() {
        return Err(
            Error::InsufficientData("no sensor has two complete days to cluster".into()).into(),
        );
    }
    let seed = ctx.seed("cluster");
    let n = features.len();
    let (fit, elbow) = match k_override.or(ctx.config.cluster.k) {
        Some(k) => {
            if k > n {
                return Err(CliError::Config(format!(
                    "K = {k} exceeds the {n} clusterable sensors"
                )));
            }
            let fit = kmeans_fit(&features, k, seed)?;
            let e = ElbowFile {
                method: "override".into(),
                k,
                no_elbow: false,
                ks: vec![k],
                inertias: vec![fit.inertia],
                skipped_sensors: skipped,
            };
            (fit, e)
        }
        None => {
            let ks: Vec<usize> = ctx
                .config
                .k_range()
                .into_iter()
                .filter(|&k| k <= n)
                .collect();
            if ks.is_empty() {
                return Err(CliError::Config(format!(
                    "cluster.k_min = {} exceeds the {n} clusterable sensors",
                    ctx.config.cluster.k_min
                )));
            }
            if ks.len() < 3 {
                let fit = kmeans_fit(&features, ks[0], seed)?;
                let e = ElbowFile {
                    method: "too-few-sensors".into(),
                    k: ks[0],
                    no_elbow: true,
                    ks: vec![ks[0]],
                    inertias: vec![fit.inertia],
                    skipped_sensors: skipped,
                };
                (fit, e)
            } else {
                let r = elbow_select(&features, &ks, seed)?;
                let pos =
                    r.ks.iter()
                        .position(|&k| k == r.k_best)
                        .expect("chosen K is in the sweep");
                let e = ElbowFile {
                    method: "elbow".into(),
                    k: r.k_best,
                    no_elbow: r.no_elbow,
                    ks: r.ks.clone(),
                    inertias: r.inertias.clone(),
                    skipped_sensors: skipped,
                };
                (r.fits.into_iter().nth(pos).expect("fit exists"), e)
            }
        }
    };
    fs::create_dir_all(ctx.layout.clusters()).map_err(|e| io_err(&ctx.layout.clusters(), e))?;
    fit.save(&ctx.layout.assignment())?;
    write_inertia_csv(&ctx.layout.inertia_csv(), &elbow.ks, &elbow.inertias)?;
    write_json(&ctx.layout.elbow(), &elbow)?;
    info!("{n} sensors in {} clusters ({})", elbow.k, elbow.method);
    Ok(elbow)
}

fn load_assignment(ctx: &Context) -> Result<ClusterAssignment, CliError> {
    let p = ctx.layout.assignment();
    if !exists(&p) {
        return Err(CliError::Data(format!(
            "no cluster assignment at {}; run `gasfgan cluster` first",
            p.display()
        )));
    }
    Ok(ClusterAssignment::load(&p)?)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DayRef {
    pub sensor_id: String,
    pub day: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<DayRef>,
    pub test: Vec<DayRef>,
}

fn day_ref(s: &DailySeries) -> DayRef {
    DayRef {
        sensor_id: s.sensor_id.clone(),
        day: s.day,
    }
}

fn targets(
    assignment: &ClusterAssignment,
    cluster: Option<usize>,
    class: Option<DayClass>,
    classes: &[DayClass],
) -> Result<Vec<(usize, DayClass)>, CliError> {
    if let Some(c) = cluster {
        if c >= assignment.k {
            return Err(CliError::Config(format!(
                "cluster {c} does not exist (K = {})",
                assignment.k
            )));
        }
    }
    let clusters: Vec<usize> = cluster.map_or_else(|| (0..assignment.k).collect(), |c| vec![c]);
    let classes: Vec<DayClass> = class.map_or_else(|| classes.to_vec(), |c| vec![c]);
    Ok(clusters
        .into_iter()
        .flat_map(|c| classes.iter().map(move |&d| (c, d)))
        .collect())
}

/// Complete days of every sensor in cluster `c` for one day class.
fn cluster_days(
    ctx: &Context,
    index: &[IndexEntry],
    a: &ClusterAssignment,
    c: usize,
    class: DayClass,
) -> Result<Vec<DailySeries>, CliError> {
    let mut days = Vec::new();
    for entry in index {
        if a.labels.get(&entry.sensor_id) == Some(&c) {
            days.extend(load_dataset(ctx, entry, class)?.fully_observed);
        }
    }
    Ok(days)
}

/// Trains one model per (cluster, day class), saving a checkpoint after every epoch.
pub fn cmd_train(
    ctx: &Context,
    cluster: Option<usize>,
    class: Option<DayClass>,
    resume: bool,
) -> Result<usize, CliError> {
    let cfg = &ctx.config;
    let index = load_index(ctx)?;
    let assignment = load_assignment(ctx)?;
    let explicit = cluster.is_some() && class.is_some();
    let mut trained = 0;
    for (c, cl) in targets(&assignment, cluster, class, &cfg.data.day_classes)? {
        let days = cluster_days(ctx, &index, &assignment, c, cl)?;
        let dir = ctx.layout.model_dir(c, cl);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        if days.len() < 2 {
            let reason = format!(
                "cluster {c} has {} complete {cl} days, need at least 2",
                days.len()
            );
            if explicit {
                return Err(Error::InsufficientData(reason).into());
            }
            warn!("skipping: {reason}");
            write_json(
                &ctx.layout.skipped(c, cl),
                &BTreeMap::from([("reason", reason)]),
            )?;
            continue;
        }
        let skipped = ctx.layout.skipped(c, cl);
        if exists(&skipped) {
            fs::remove_file(&skipped).map_err(|e| io_err(&skipped, e))?;
        }
        let (train, test) = train_test_split(
            &days,
            cfg.data.split_ratio,
            ctx.seed(&format!("split/{c}/{cl}")),
        )?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::InsufficientData(format!(
                "cluster {c} {cl}: split of {} days leaves an empty part",
                days.len()
            ))
            .into());
        }
        write_json(
            &ctx.layout.split(c, cl),
            &SplitFile {
                train: train.iter().map(day_ref).collect(),
                test: test.iter().map(day_ref).collect(),
            },
        )?;
        let stats = PreprocessStats::fit(train.iter(), cfg.data.pad)?;
        let images = training_images(&train, &stats, cfg.data.smoothing_sigma)?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = ctx.seed(&format!("train/{c}/{cl}"));

        let ckpt_path = ctx.layout.checkpoint(c, cl);
        let log_path = ctx.layout.train_log(c, cl);
        let mut trainer = if resume && exists(&ckpt_path) {
            let ckpt = ModelCheckpoint::load(&ckpt_path)?;
            if ckpt.stats != stats {
                return Err(CliError::Data(format!(
                    "checkpoint {} was trained on different data; rerun without --resume",
                    ckpt_path.display()
                )));
            }
            let log = if exists(&log_path) {
                TrainLog::read_jsonl(&log_path)?
            } else {
                TrainLog::default()
            };
            info!(
                "resuming cluster {c} {cl} at epoch {}",
                ckpt.epochs_completed
            );
            let mut t = Trainer::resume(&images, ckpt, log)?;
            t.config.epochs = train_cfg.epochs;
            t
        } else {
            let mut rng = seeded(ctx.seed(&format!("init/{c}/{cl}")));
            let g = Generator::new(cfg.generator_spec(), &mut rng)?;
            let d = Discriminator::new(cfg.discriminator_spec(), &mut rng)?;
            Trainer::new(&images, g, d, train_cfg, cfg.data.pad)?
        };
        info!(
            "training cluster {c} {cl}: {} train days, {} test days",
            train.len(),
            test.len()
        );
        let save = |t: &Trainer| -> gasfgan::Result<()> {
            t.checkpoint(stats, Some(c), Some(cl)).save(&ckpt_path)?;
            let tmp = log_path.with_extension("jsonl.tmp");
            t.log.write_jsonl(&tmp)?;
            fs::rename(&tmp, &log_path).map_err(|e| Error::io(&log_path, e))
        };
        trainer.run(save)?;
        save(&trainer)?;
        trained += 1;
    }
    Ok(trained)
}

fn load_model(ctx: &Context, c: usize, cl: DayClass) -> Result<ModelCheckpoint, CliError> {
    let p = ctx.layout.checkpoint(c, cl);
    if !exists(&p) {
        return Err(CliError::Data(format!(
            "no checkpoint for cluster {c} ({cl}) at {}; run `gasfgan train --cluster {c} --day-class {cl}` first",
            p.display()
        )));
    }
    Ok(ModelCheckpoint::load(&p)?)
}

fn search_config(ctx: &Context, label: &str) -> LatentSearchConfig {
    LatentSearchConfig {
        seed: ctx.seed(label),
        ..ctx.config.impute.clone()
    }
}

pub const METHODS: [&str; 3] = ["gan", "mean_fill", "historical_average"];

/// Imputes a CSV of corrupted days, routing each sensor to its cluster model.
pub fn cmd_impute_one_shot(
    ctx: &Context,
    file: &Path,
    class: Option<DayClass>,
) -> Result<usize, CliError> {
    if !file.is_file() {
        return Err(CliError::Config(format!(
            "one-shot input {} does not exist",
            file.display()
        )));
    }
    let assignment = load_assignment(ctx)?;
    let holidays = ctx.config.holidays();
    let mut groups: BTreeMap<(usize, DayClass), Vec<DailySeries>> = BTreeMap::new();
    for (id, days) in data::load_csv(file, ctx.config.data.intervals)? {
        let c = route_sensor(&id, &assignment, None)?;
        for d in days {
            let cl = class.unwrap_or_else(|| {
                if holidays.contains(&d.day) {
                    DayClass::NonWeekday
                } else {
                    d.day_class()
                }
            });
            groups.entry((c, cl)).or_default().push(d);
        }
    }
    let mut results = Vec::new();
    for ((c, cl), samples) in groups {
        let ck = load_model(ctx, c, cl)?;
        for (s, r) in samples.iter().zip(impute_batch(
            &samples,
            &ck.generator,
            &ck.stats,
            &search_config(ctx, "one-shot"),
        )?) {
            match r {
                Ok(r) => results.push(r),
                Err(e) => warn!("sensor {} day {} not imputed: {e}", s.sensor_id, s.day),
            }
        }
    }
    if results.is_empty() {
        return Err(Error::EmptyInput(format!("nothing imputed from {}", file.display())).into());
    }
    fs::create_dir_all(ctx.layout.impute()).map_err(|e| io_err(&ctx.layout.impute(), e))?;
    write_results_csv(&ctx.layout.impute().join("one_shot.csv"), &results)?;
    write_summary_json(&ctx.layout.impute().join("one_shot.json"), &results)?;
    info!("imputed {} days from {}", results.len(), file.display());
    Ok(results.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFile {
    /// Spearman correlation between missing rate and mean MAE, per method.
    pub spearman_mae_vs_mr: BTreeMap<String, f64>,
}

/// Corrupts held-out days at every missing rate and repetition, imputes them
/// with the GAN and both baselines, and scores each (sensor, rate, repetition).
pub fn cmd_impute_sweep(
    ctx: &Context,
    rates: &[f64],
    cluster: Option<usize>,
    class: Option<DayClass>,
) -> Result<Vec<MetricRow>, CliError> {
    let cfg = &ctx.config;
    let index = load_index(ctx)?;
    let assignment = load_assignment(ctx)?;
    let explicit = cluster.is_some();
    let mut rows = Vec::new();
    for (c, cl) in targets(&assignment, cluster, class, &cfg.data.day_classes)? {
        if exists(&ctx.layout.skipped(c, cl)) && !explicit {
            warn!("cluster {c} {cl} was not trained (insufficient data); skipping");
            continue;
        }
        let ck = load_model(ctx, c, cl)?;
        let split: SplitFile = read_json(&ctx.layout.split(c, cl))?;
        let days: BTreeMap<DayRef, DailySeries> = cluster_days(ctx, &index, &assignment, c, cl)?
            .into_iter()
            .map(|d| (day_ref(&d), d))
            .collect();
        let lookup = |refs: &[DayRef]| -> Result<Vec<DailySeries>, CliError> {
            refs.iter()
                .map(|r| {
                    days.get(r).cloned().ok_or_else(|| {
                        CliError::Data(format!(
                            "split references sensor {} day {} missing from the datasets; retrain after ingest",
                            r.sensor_id, r.day
                        ))
                    })
                })
                .collect()
        };
        let train = lookup(&split.train)?;
        let test = lookup(&split.test)?;
        let ha = HistoricalAverage::fit(train.iter())?;
        for &mr in rates {
            if CorruptionSpec::new(mr, 0)?.missing_count(cfg.data.intervals) == 0 {
                warn!(
                    "missing rate {mr} hides no interval at T = {}; skipping",
                    cfg.data.intervals
                );
                continue;
            }
            for rep in 0..cfg.evaluate.repetitions {
                let label = format!("{c}/{cl}/{mr:.4}/{rep}");
                let base = ctx.seed(&format!("corrupt/{label}"));
                let corrupted = test
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        corrupt(
                            d,
                            &CorruptionSpec::new(mr, derive_index_seed(base, i as u64))?,
                        )
                    })
                    .collect::<gasfgan::Result<Vec<_>>>()?;
                let outcomes = impute_batch(
                    &corrupted,
                    &ck.generator,
                    &ck.stats,
                    &search_config(ctx, &format!("impute/{label}")),
                )?;
                let mut ok = Vec::new();
                // Pooled per sensor: truth, three predictions, evaluation flags.
                let mut pooled: BTreeMap<&str, [Vec<f64>; 4]> = BTreeMap::new();
                let mut flags: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
                for ((truth, input), r) in test.iter().zip(&corrupted).zip(outcomes) {
                    let r = match r {
                        Ok(r) => r,
                        Err(e) => {
                            warn!(
                                "sensor {} day {} not imputed: {e}",
                                truth.sensor_id, truth.day
                            );
                            continue;
                        }
                    };
                    let mean = mean_fill(input)?;
                    let hist = ha.impute(input)?;
                    let p = pooled.entry(&truth.sensor_id).or_default();
                    p[0].extend_from_slice(&truth.values);
                    p[1].extend_from_slice(&r.imputed.values);
                    p[2].extend_from_slice(&mean.values);
                    p[3].extend_from_slice(&hist.values);
                    flags
                        .entry(&truth.sensor_id)
                        .or_default()
                        .extend(gasfgan::metrics::eval_mask(&input.mask, &truth.mask));
                    ok.push(r);
                }
                if !ok.is_empty() {
                    let path = ctx.layout.sweep_results(c, cl, mr, rep);
                    fs::create_dir_all(path.parent().expect("has parent"))
                        .map_err(|e| io_err(&path, e))?;
                    write_results_csv(&path, &ok)?;
                }
                for (sensor, p) in &pooled {
                    for (m, method) in METHODS.iter().enumerate() {
                        let mut row = MetricRow::score(
                            method,
                            sensor,
                            Some(c),
                            mr,
                            rep,
                            &p[0],
                            &p[m + 1],
                            &flags[sensor],
                        )?;
                        row.day_class = Some(cl);
                        rows.push(row);
                    }
                }
            }
            info!("cluster {c} {cl}: missing rate {mr} done");
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("the sweep produced no metric rows".into()).into());
    }
    let report = aggregate_report(rows.clone(), GroupBy::MissingRate)?;
    let dir = ctx.layout.impute();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    report.write_rows_csv(&ctx.layout.metrics_csv())?;
    report.write_groups_csv(&dir.join("by_missing_rate.csv"))?;
    report.write_json(&dir.join("by_missing_rate.json"))?;
    let curves = error_curves(&rows, |r| r.mae);
    let trend = TrendFile {
        spearman_mae_vs_mr: curves
            .iter()
            .map(|s| {
                let (x, y): (Vec<f64>, Vec<f64>) = s.points.iter().copied().unzip();
                (s.name.clone(), spearman(&x, &y))
            })
            .collect(),
    };
    write_json(&dir.join("trend.json"), &trend)?;
    line_chart(
        &dir.join("mae_vs_missing_rate.svg"),
        "MAE by missing rate",
        "missing rate",
        "MAE",
        &curves,
    )?;
    Ok(rows)
}

/// Mean of a metric per (method, missing rate), one series per method.
fn error_curves(rows: &[MetricRow], metric: impl Fn(&MetricRow) -> f64) -> Vec<Series> {
    let mut acc: BTreeMap<&str, BTreeMap<String, (f64, f64, usize)>> = BTreeMap::new();
    for r in rows {
        let v = metric(r);
        if v.is_nan() {
            continue;
        }
        let e = acc
            .entry(&r.method)
            .or_default()
            .entry(format!("{:06.4}", r.missing_rate))
            .or_insert((r.missing_rate, 0.0, 0));
        e.1 += v;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(method, by_mr)| Series {
            name: method.to_string(),
            points: by_mr
                .into_values()
                .map(|(mr, s, n)| (mr, s / n as f64))
                .collect(),
        })
        .collect()
}

fn load_metrics(ctx: &Context) -> Result<Vec<MetricRow>, CliError> {
    let p = ctx.layout.metrics_csv();
    if !exists(&p) {
        return Err(CliError::Data(format!(
            "no metrics at {}; run `gasfgan impute` first",
            p.display()
        )));
    }
    Ok(read_rows_csv(&p)?)
}

/// Aggregates the sweep's metric rows by sensor, cluster and missing rate.
pub fn cmd_evaluate(ctx: &Context) -> Result<(), CliError> {
    let rows = load_metrics(ctx)?;
    let dir = ctx.layout.evaluate();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    for (by, name) in [
        (GroupBy::Sensor, "sensor"),
        (GroupBy::Cluster, "cluster"),
        (GroupBy::MissingRate, "missing_rate"),
    ] {
        let report = aggregate_report(rows.clone(), by)?;
        report.write_groups_csv(&dir.join(format!("by_{name}.csv")))?;
        report.write_json(&dir.join(format!("by_{name}.json")))?;
        if by == GroupBy::MissingRate {
            for g in &report.groups {
                info!(
                    "{:<18} mr {}  MAE {:.3}  RMSE {:.3}  MRE {:.3} (median over {} rows)",
                    g.method, g.key, g.mae.median, g.rmse.median, g.mre.median, g.count
                );
            }
        }
    }
    info!("aggregates written to {}", dir.display());
    Ok(())
}

/// Renders plots and a markdown summary from whatever artifacts exist.
pub fn cmd_report(ctx: &Context) -> Result<Vec<String>, CliError> {
    let dir = ctx.layout.report();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut md = String::from("# Run report\n\n");
    let mut written = Vec::new();

    if exists(&ctx.layout.elbow()) {
        let e: ElbowFile = read_json(&ctx.layout.elbow())?;
        md.push_str(&format!("Clusters: K = {} ({}).\n\n", e.k, e.method));
        if e.ks.len() > 1 {
            let points =
                e.ks.iter()
                    .map(|&k| k as f64)
                    .zip(e.inertias.iter().copied())
                    .collect();
            line_chart(
                &dir.join("inertia.svg"),
                "k-means inertia",
                "K",
                "inertia",
                &[Series {
                    name: "inertia".into(),
                    points,
                }],
            )?;
            written.push("inertia.svg".to_string());
        }
    }

    if exists(&ctx.layout.assignment()) {
        let a = load_assignment(ctx)?;
        let mut table = String::new();
        for c in 0..a.k {
            for cl in DayClass::ALL {
                let log_path = ctx.layout.train_log(c, cl);
                if !exists(&log_path) {
                    continue;
                }
                let log = TrainLog::read_jsonl(&log_path)?;
                let trace = log.mmd_trace();
                let (Some(first), Some(last)) = (trace.first(), trace.last()) else {
                    continue;
                };
                table.push_str(&format!(
                    "| {c} | {cl} | {} | {first:.4} | {last:.4} |\n",
                    trace.len()
                ));
                let name = format!("mmd_{c}_{cl}.svg");
                let points = trace
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| ((i + 1) as f64, m))
                    .collect();
                line_chart(
                    &dir.join(&name),
                    &format!("MMD, cluster {c} {cl}"),
                    "epoch",
                    "MMD",
                    &[Series {
                        name: "mmd".into(),
                        points,
                    }],
                )?;
                written.push(name);
            }
        }
        if !table.is_empty() {
            md.push_str(
                "| cluster | day class | epochs | first MMD | last MMD |\n|---|---|---|---|---|\n",
            );
            md.push_str(&table);
            md.push('\n');
        }
    }

    if exists(&ctx.layout.metrics_csv()) {
        let rows = load_metrics(ctx)?;
        let metrics: [(&str, fn(&MetricRow) -> f64); 3] =
            [("mae", |r| r.mae), ("rmse", |r| r.rmse), ("mre", |r| r.mre)];
        for (name, f) in metrics {
            let curves = error_curves(&rows, f);
            let file = format!("{name}_vs_missing_rate.svg");
            line_chart(
                &dir.join(&file),
                &format!("{} by missing rate", name.to_uppercase()),
                "missing rate",
                name,
                &curves,
            )?;
            written.push(file);
        }
        md.push_str("| method | missing rate | mean MAE |\n|---|---|---|\n");
        for s in error_curves(&rows, |r| r.mae) {
            for (mr, v) in &s.points {
                md.push_str(&format!("| {} | {mr:.2} | {v:.3} |\n", s.name));
            }
        }
        md.push('\n');
    }

    if written.is_empty() {
        md.push_str("No artifacts found yet.\n");
    } else {
        md.push_str("Plots:\n\n");
        for w in &written {
            md.push_str(&format!("- [{w}]({w})\n"));
        }
    }
    let p = dir.join("summary.md");
    fs::write(&p, md).map_err(|e| io_err(&p, e))?;
    Ok(written)
}
