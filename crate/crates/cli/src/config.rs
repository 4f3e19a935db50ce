//! Run configuration: one TOML document, validated in full before any work starts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use gasfgan::model::{DiscriminatorSpec, GeneratorSpec, DEFAULT_LATENT_DIM};
use gasfgan::{DayClass, LatentSearchConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUTPUT_DIR_ENV: &str = "GASFGAN_OUTPUT_DIR";
pub const DEVICE_ENV: &str = "GASFGAN_DEVICE";

/// Largest missing rate accepted in a sweep.
pub const MAX_MISSING_RATE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Raw CSV files with `timestamp,sensor_id,flow` rows.
    pub csv: Vec<PathBuf>,
    /// Intervals per day.
    pub intervals: usize,
    pub pad: usize,
    /// Extra dates treated as non-weekdays.
    pub holidays: Vec<NaiveDate>,
    /// Day classes to train and evaluate.
    pub day_classes: Vec<DayClass>,
    /// Fraction of complete days used for training.
    pub split_ratio: f64,
    pub smoothing_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: Vec::new(),
            intervals: 288,
            pad: 3,
            holidays: Vec::new(),
            day_classes: DayClass::ALL.to_vec(),
            split_ratio: 0.8,
            smoothing_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Inclusive bounds of the elbow sweep.
    pub k_min: usize,
    pub k_max: usize,
    /// Fixed K; skips the elbow sweep.
    pub k: Option<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 30,
            k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Generator channels, widest first. Empty means 512, 256, 128, 64.
    pub generator_channels: Vec<usize>,
    /// Discriminator channels, narrowest first. Empty means 64, 128, 256, 512.
    pub discriminator_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            generator_channels: Vec::new(),
            discriminator_channels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub missing_rates: Vec<f64>,
    pub repetitions: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            missing_rates: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            repetitions: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub cluster: ClusterConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub impute: LatentSearchConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("outputs"),
            data: DataConfig::default(),
            cluster: ClusterConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            impute: LatentSearchConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    /// Parses a config file. Relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.data.csv {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Applies the output-root environment override and checks the device.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
        match std::env::var(DEVICE_ENV) {
            Ok(d) if !d.is_empty() && !d.eq_ignore_ascii_case("cpu") => Err(bad(format!(
                "{DEVICE_ENV}={d} is not available; only cpu is supported"
            ))),
            _ => Ok(()),
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        let side = self.image_side();
        let mut spec = GeneratorSpec::paper_scale(side);
        spec.latent_dim = self.model.latent_dim;
        if !self.model.generator_channels.is_empty() {
            spec.channels = self.model.generator_channels.clone();
        }
        spec
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        let mut spec = DiscriminatorSpec::paper_scale(self.image_side());
        if !self.model.discriminator_channels.is_empty() {
            spec.channels = self.model.discriminator_channels.clone();
        }
        spec
    }

    pub fn image_side(&self) -> usize {
        self.data.intervals + 2 * self.data.pad
    }

    pub fn holidays(&self) -> BTreeSet<NaiveDate> {
        self.data.holidays.iter().copied().collect()
    }

    pub fn k_range(&self) -> Vec<usize> {
        (self.cluster.k_min..=self.cluster.k_max).collect()
    }

    /// Checks every field; nothing is computed or written before this passes.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.csv.is_empty() {
            return Err(bad("data.csv lists no input files"));
        }
        for p in &self.data.csv {
            if !p.is_file() {
                return Err(bad(format!("input file {} does not exist", p.display())));
            }
        }
        let t = self.data.intervals;
        if t == 0 || 1440 % t != 0 {
            return Err(bad(format!(
                "data.intervals = {t} does not divide a day evenly"
            )));
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(bad(format!(
                "data.split_ratio = {} must lie in (0, 1)",
                self.data.split_ratio
            )));
        }
        if !(self.data.smoothing_sigma >= 0.0 && self.data.smoothing_sigma.is_finite()) {
            return Err(bad(
                "data.smoothing_sigma must be a finite non-negative number",
            ));
        }
        if self.data.day_classes.is_empty() {
            return Err(bad("data.day_classes is empty"));
        }
        if self.cluster.k_min == 0 || self.cluster.k_max < self.cluster.k_min {
            return Err(bad(format!(
                "cluster range {}..={} is invalid",
                self.cluster.k_min, self.cluster.k_max
            )));
        }
        if self.cluster.k == Some(0) {
            return Err(bad("cluster.k must be at least 1"));
        }
        for &mr in &self.evaluate.missing_rates {
            check_missing_rate(mr)?;
        }
        if self.evaluate.missing_rates.is_empty() {
            return Err(bad("evaluate.missing_rates is empty"));
        }
        if self.evaluate.repetitions == 0 {
            return Err(bad("evaluate.repetitions must be at least 1"));
        }
        self.train
            .validate()
            .map_err(|e| bad(format!("train: {e}")))?;
        self.impute
            .validate()
            .map_err(|e| bad(format!("impute: {e}")))?;
        self.generator_spec()
            .validate()
            .map_err(|e| bad(format!("model: {e}")))?;
        self.discriminator_spec()
            .validate()
            .map_err(|e| bad(format!("model: {e}")))?;
        Ok(())
    }
}

pub fn check_missing_rate(mr: f64) -> Result<(), CliError> {
    if (0.0..=MAX_MISSING_RATE).contains(&mr) {
        Ok(())
    } else {
        Err(bad(format!(
            "missing rate {mr} must lie in [0, {MAX_MISSING_RATE}]"
        )))
    }
}

/// Parses `0.05,0.2` or `5%,20%`.
pub fn parse_missing_rates(list: &str) -> Result<Vec<f64>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let v = match s.strip_suffix('%') {
                Some(p) => p.trim().parse::<f64>().map(|v| v / 100.0),
                None => s.parse::<f64>(),
            }
            .map_err(|_| bad(format!("cannot parse missing rate {s:?}")))?;
            check_missing_rate(v)?;
            Ok(v)
        })
        .collect()
}
