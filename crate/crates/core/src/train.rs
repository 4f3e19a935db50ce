//! Adversarial training with label smoothing, label flipping and an MMD trace.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{DailySeries, DayClass};
use crate::error::{Error, Result};
use crate::gasf::{self, GasfImage, PreprocessStats};
use crate::model::{images_to_tensor, Discriminator, Generator, ModelCheckpoint, OptimizerState};
use crate::nn::{self, Adam, Mode, Tensor};
use crate::rng::{derive_index_seed, derive_seed, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLoss {
    /// Maximize `log D(G(z))`.
    #[default]
    NonSaturating,
    /// Minimize `log(1 - D(G(z)))`.
    Saturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pos_label_range: [f64; 2],
    pub neg_label_range: [f64; 2],
    pub flip_fraction: f64,
    /// Discriminator steps per generator step.
    pub d_steps: usize,
    pub generator_loss: GeneratorLoss,
    /// Momentum used to fold batch statistics into BN running estimates.
    pub bn_momentum: f64,
    /// Latent draws used to re-estimate generator BN statistics after each epoch.
    pub calibration_samples: usize,
    /// Synthetic series scored per epoch; `None` matches the training-set size.
    pub mmd_samples: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 50,
            batch_size: 32,
            pos_label_range: [0.8, 1.1],
            neg_label_range: [0.0, 0.3],
            flip_fraction: 0.1,
            d_steps: 1,
            generator_loss: GeneratorLoss::NonSaturating,
            bn_momentum: 0.1,
            calibration_samples: 256,
            mmd_samples: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return bad(format!(
                "flip_fraction must lie in [0, 1], got {}",
                self.flip_fraction
            ));
        }
        for (name, r) in [
            ("pos_label_range", self.pos_label_range),
            ("neg_label_range", self.neg_label_range),
        ] {
            if !(r[0] < r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return bad(format!("{name} [{}, {}] is degenerate", r[0], r[1]));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam decay rates must lie in [0, 1)".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch normalization".into());
        }
        if self.d_steps == 0 {
            return bad("d_steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.calibration_samples < 2 {
            return bad(
                "bn_momentum must lie in [0, 1] and calibration_samples be at least 2".into(),
            );
        }
        Ok(())
    }
}

/// Soft targets for one mini-batch. Entry `i` of both vectors belongs to the
/// `i`-th real and `i`-th synthetic image respectively.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLabels {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    /// Indices whose positive and negative labels were exchanged.
    pub flipped: Vec<usize>,
}

/// Uniform soft labels, then `round(flip_fraction * batch)` pairs swapped between classes.
pub fn noisy_labels(batch_size: usize, cfg: &TrainConfig, rng: &mut Rng) -> NoisyLabels {
    let [plo, phi] = cfg.pos_label_range;
    let [nlo, nhi] = cfg.neg_label_range;
    let mut positive: Vec<f64> = (0..batch_size)
        .map(|_| rng.random_range(plo..=phi))
        .collect();
    let mut negative: Vec<f64> = (0..batch_size)
        .map(|_| rng.random_range(nlo..=nhi))
        .collect();
    let count = ((cfg.flip_fraction * batch_size as f64).round() as usize).min(batch_size);
    let mut flipped = index::sample(rng, batch_size, count).into_vec();
    flipped.sort_unstable();
    for &i in &flipped {
        std::mem::swap(&mut positive[i], &mut negative[i]);
    }
    NoisyLabels {
        positive,
        negative,
        flipped,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance; 1.0 when every pair coincides.
pub fn median_heuristic<S: AsRef<[f64]>>(data: &[S]) -> f64 {
    let mut d = Vec::with_capacity(data.len() * data.len().saturating_sub(1) / 2);
    for i in 0..data.len() {
        for j in i + 1..data.len() {
            d.push(sq_dist(data[i].as_ref(), data[j].as_ref()).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn rbf(a: &[f64], b: &[f64], bandwidths: &[f64]) -> f64 {
    let d2 = sq_dist(a, b);
    bandwidths
        .iter()
        .map(|s| (-d2 / (2.0 * s * s)).exp())
        .sum::<f64>()
        / bandwidths.len() as f64
}

/// Squared-root MMD between two sample sets with an RBF kernel averaged over
/// `bandwidths`. Without bandwidths, the median heuristic on the pooled sample is used.
pub fn mmd_score<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    real: &[A],
    synth: &[B],
    bandwidths: Option<&[f64]>,
) -> Result<f64> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::EmptyInput("MMD needs non-empty sample sets".into()));
    }
    let len = real[0].as_ref().len();
    if let Some(bad) = real
        .iter()
        .map(|v| v.as_ref().len())
        .chain(synth.iter().map(|v| v.as_ref().len()))
        .find(|&l| l != len)
    {
        return Err(Error::ShapeMismatch {
            expected: format!("series of length {len}"),
            actual: format!("length {bad}"),
        });
    }
    let owned;
    let bw = match bandwidths {
        Some(b) if !b.is_empty() && b.iter().all(|s| *s > 0.0) => b,
        Some(_) => return Err(Error::InvalidArgument("bandwidths must be positive".into())),
        None => {
            let pooled: Vec<&[f64]> = real
                .iter()
                .map(|v| v.as_ref())
                .chain(synth.iter().map(|v| v.as_ref()))
                .collect();
            owned = [median_heuristic(&pooled)];
            &owned[..]
        }
    };
    let block = |x: &[&[f64]], y: &[&[f64]]| -> f64 {
        x.iter()
            .map(|a| y.iter().map(|b| rbf(a, b, bw)).sum::<f64>())
            .sum()
    };
    let r: Vec<&[f64]> = real.iter().map(|v| v.as_ref()).collect();
    let s: Vec<&[f64]> = synth.iter().map(|v| v.as_ref()).collect();
    let (n, m) = (r.len() as f64, s.len() as f64);
    let bracket = block(&r, &r) / (n * n) - 2.0 * block(&r, &s) / (n * m) + block(&s, &s) / (m * m);
    Ok(bracket.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub mmd: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn mmd_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mmd).collect()
    }

    /// Appends one JSON line per record.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }
}

/// Encodes complete days with shared stats and smooths them for training.
pub fn training_images(
    series: &[DailySeries],
    stats: &PreprocessStats,
    sigma: f64,
) -> Result<Vec<GasfImage>> {
    series
        .iter()
        .map(|s| {
            let (norm, _) = gasf::preprocess(s, Some(stats))?;
            let img = gasf::encode(&norm)?;
            if sigma > 0.0 {
                gasf::gaussian_smooth(&img, sigma)
            } else {
                Ok(img)
            }
        })
        .collect()
}

fn check_finite(value: f64, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} = {value} at epoch {epoch}, batch {batch}"
        )))
    }
}

/// Generator loss and its parameter gradients for a batch of latent rows; the
/// discriminator is only read.
pub fn generator_gradients(
    generator: &Generator,
    discriminator: &Discriminator,
    z: &[f64],
    n: usize,
    loss: GeneratorLoss,
) -> (f64, Vec<Vec<f64>>, crate::model::GenTape) {
    let (fake, gtape) = generator.forward(z, n, Mode::Train);
    let (logits, dtape) = discriminator.forward(&fake, Mode::Train);
    let inv = 1.0 / n as f64;
    let (value, dlogits): (f64, Vec<f64>) = match loss {
        GeneratorLoss::NonSaturating => (
            logits.iter().map(|&l| nn::softplus(-l)).sum::<f64>() * inv,
            logits
                .iter()
                .map(|&l| (nn::sigmoid(l) - 1.0) * inv)
                .collect(),
        ),
        GeneratorLoss::Saturating => (
            -logits.iter().map(|&l| nn::softplus(l)).sum::<f64>() * inv,
            logits.iter().map(|&l| -nn::sigmoid(l) * inv).collect(),
        ),
    };
    let (dimg, _) = discriminator.backward(&dtape, &dlogits, false);
    let (_, grads) = generator.backward(&gtape, &dimg, true);
    (value, grads.expect("requested"), gtape)
}

/// Owns both networks and their optimizers for the duration of training.
pub struct Trainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub config: TrainConfig,
    pub log: TrainLog,
    pub epochs_completed: usize,
    opt_g: Adam,
    opt_d: Adam,
    real: Tensor,
    real_series: Vec<Vec<f64>>,
    bandwidths: Vec<f64>,
    pad: usize,
}

impl Trainer {
    /// `pad` is the replicate padding the images were built with.
    pub fn new(
        real_images: &[GasfImage],
        generator: Generator,
        discriminator: Discriminator,
        config: TrainConfig,
        pad: usize,
    ) -> Result<Self> {
        let opt_g = Adam::new(
            config.learning_rate,
            config.beta1,
            config.beta2,
            &generator
                .params()
                .iter()
                .map(|p| p.len())
                .collect::<Vec<_>>(),
        );
        let opt_d = Adam::new(
            config.learning_rate,
            config.beta1,
            config.beta2,
            &discriminator
                .params()
                .iter()
                .map(|p| p.len())
                .collect::<Vec<_>>(),
        );
        Self::assemble(
            real_images,
            generator,
            discriminator,
            config,
            pad,
            opt_g,
            opt_d,
            0,
            TrainLog::default(),
        )
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(
        real_images: &[GasfImage],
        checkpoint: ModelCheckpoint,
        log: TrainLog,
    ) -> Result<Self> {
        let opt = checkpoint.optimizer.ok_or_else(|| {
            Error::InvalidArgument("checkpoint has no optimizer state to resume from".into())
        })?;
        let mut log = log;
        log.records.truncate(checkpoint.epochs_completed);
        Self::assemble(
            real_images,
            checkpoint.generator,
            checkpoint.discriminator,
            checkpoint.train_config,
            checkpoint.stats.pad,
            opt.generator,
            opt.discriminator,
            checkpoint.epochs_completed,
            log,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        real_images: &[GasfImage],
        generator: Generator,
        discriminator: Discriminator,
        config: TrainConfig,
        pad: usize,
        opt_g: Adam,
        opt_d: Adam,
        epochs_completed: usize,
        log: TrainLog,
    ) -> Result<Self> {
        config.validate()?;
        if real_images.is_empty() {
            return Err(Error::EmptyInput("no training images".into()));
        }
        if real_images.len() < 2 * config.batch_size {
            return Err(Error::InsufficientData(format!(
                "{} training images, need at least {} (two batches)",
                real_images.len(),
                2 * config.batch_size
            )));
        }
        let side = generator.output_size();
        if discriminator.spec.input_size != side {
            return Err(Error::ModelConfig(format!(
                "generator emits {side}x{side} but discriminator expects {}",
                discriminator.spec.input_size
            )));
        }
        let refs: Vec<&GasfImage> = real_images.iter().collect();
        let real = images_to_tensor(&refs)?;
        discriminator.check_input(&real)?;
        let real_series = real_images
            .iter()
            .map(|img| gasf::decode_normalized(img, pad))
            .collect::<Result<Vec<_>>>()?;
        let bandwidths = vec![median_heuristic(&real_series)];
        Ok(Self {
            generator,
            discriminator,
            config,
            log,
            epochs_completed,
            opt_g,
            opt_d,
            real,
            real_series,
            bandwidths,
            pad,
        })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    fn batch(&self, idx: &[usize]) -> Tensor {
        let len = self.real.sample_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend_from_slice(self.real.sample(i));
        }
        Tensor::from_vec(idx.len(), 1, self.real.h, self.real.w, data)
    }

    fn discriminator_step(&mut self, real: &Tensor, rng: &mut Rng) -> f64 {
        let n = real.n;
        let labels = noisy_labels(n, &self.config, rng);
        let z = nn::standard_normal(n, self.generator.latent_dim(), rng);
        let (fake, _) = self.generator.forward(&z, n, Mode::Train);
        let inv = 1.0 / n as f64;
        let bce = |logits: &[f64], y: &[f64]| -> (f64, Vec<f64>) {
            let loss = logits
                .iter()
                .zip(y)
                .map(|(&l, &t)| nn::softplus(l) - t * l)
                .sum::<f64>()
                * inv;
            let grad = logits
                .iter()
                .zip(y)
                .map(|(&l, &t)| (nn::sigmoid(l) - t) * inv)
                .collect();
            (loss, grad)
        };
        let (lr, tr) = self.discriminator.forward(real, Mode::Train);
        let (loss_r, dr) = bce(&lr, &labels.positive);
        let (_, gr) = self.discriminator.backward(&tr, &dr, true);
        let (lf, tf) = self.discriminator.forward(&fake, Mode::Train);
        let (loss_f, df) = bce(&lf, &labels.negative);
        let (_, gf) = self.discriminator.backward(&tf, &df, true);
        let mut grads = gr.expect("requested");
        for (a, b) in grads.iter_mut().zip(gf.expect("requested")) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.opt_d.update(self.discriminator.params_mut(), &grads);
        let m = self.config.bn_momentum;
        self.discriminator.absorb(&tr, m);
        self.discriminator.absorb(&tf, m);
        loss_r + loss_f
    }

    fn generator_step(&mut self, n: usize, rng: &mut Rng) -> f64 {
        let z = nn::standard_normal(n, self.generator.latent_dim(), rng);
        let (loss, grads, tape) = generator_gradients(
            &self.generator,
            &self.discriminator,
            &z,
            n,
            self.config.generator_loss,
        );
        self.opt_g.update(self.generator.params_mut(), &grads);
        self.generator.absorb(&tape, self.config.bn_momentum);
        loss
    }

    /// Decoded, unpadded normalized series from `count` fresh latent draws.
    pub fn synthetic_series(
        generator: &Generator,
        count: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(count);
        let chunk = 64;
        let mut left = count;
        while left > 0 {
            let n = left.min(chunk);
            let z = nn::standard_normal(n, generator.latent_dim(), rng);
            for img in generator.generate_images(&z, n) {
                out.push(gasf::decode_normalized(&img, pad)?);
            }
            left -= n;
        }
        Ok(out)
    }

    /// Runs one epoch and appends its record to the log.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epochs_completed + 1;
        let mut rng = seeded(derive_index_seed(
            derive_seed(self.config.seed, "train.epoch"),
            epoch as u64,
        ));
        let mut order: Vec<usize> = (0..self.real.n).collect();
        order.shuffle(&mut rng);
        let b = self.config.batch_size;
        let batches = order.len() / b;
        let (mut d_total, mut g_total) = (0.0, 0.0);
        for k in 0..batches {
            let real = self.batch(&order[k * b..(k + 1) * b]);
            let mut d_loss = 0.0;
            for _ in 0..self.config.d_steps {
                d_loss = self.discriminator_step(&real, &mut rng);
            }
            check_finite(d_loss, "discriminator loss", epoch, k)?;
            let g_loss = self.generator_step(b, &mut rng);
            check_finite(g_loss, "generator loss", epoch, k)?;
            d_total += d_loss;
            g_total += g_loss;
        }
        self.generator
            .calibrate(self.config.calibration_samples, &mut rng);
        let count = self.config.mmd_samples.unwrap_or(self.real_series.len());
        let synth = Self::synthetic_series(&self.generator, count, self.pad, &mut rng)?;
        let mmd = mmd_score(&self.real_series, &synth, Some(&self.bandwidths))?;
        check_finite(mmd, "MMD", epoch, batches)?;
        self.epochs_completed = epoch;
        let record = EpochRecord {
            epoch,
            d_loss: d_total / batches as f64,
            g_loss: g_total / batches as f64,
            mmd,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: d_loss {:.4} g_loss {:.4} mmd {:.4} ({:.1}s)",
            record.d_loss,
            record.g_loss,
            record.mmd,
            record.seconds
        );
        self.log.records.push(record.clone());
        Ok(record)
    }

    /// Trains until `config.epochs`, calling `after_epoch` after each one (for
    /// periodic checkpoints and image dumps).
    pub fn run(&mut self, mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.epochs_completed < self.config.epochs {
            self.run_epoch()?;
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn checkpoint(
        &self,
        stats: PreprocessStats,
        cluster_id: Option<usize>,
        day_class: Option<DayClass>,
    ) -> ModelCheckpoint {
        ModelCheckpoint {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            stats,
            train_config: self.config.clone(),
            cluster_id,
            day_class,
            epochs_completed: self.epochs_completed,
            optimizer: Some(OptimizerState {
                generator: self.opt_g.clone(),
                discriminator: self.opt_d.clone(),
            }),
        }
    }
}

/// Trains for `cfg.epochs` epochs and returns the final checkpoint and log.
pub fn train(
    real_images: &[GasfImage],
    generator: Generator,
    discriminator: Discriminator,
    cfg: TrainConfig,
    stats: PreprocessStats,
) -> Result<(ModelCheckpoint, TrainLog)> {
    let mut trainer = Trainer::new(real_images, generator, discriminator, cfg, stats.pad)?;
    trainer.run(|_| Ok(()))?;
    Ok((trainer.checkpoint(stats, None, None), trainer.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiscriminatorSpec, GeneratorSpec};

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn labels_fall_in_their_ranges_before_flipping() {
        let mut c = cfg();
        c.flip_fraction = 0.0;
        let l = noisy_labels(1000, &c, &mut seeded(1));
        assert!(l.flipped.is_empty());
        assert!(l.positive.iter().all(|v| (0.8..=1.1).contains(v)));
        assert!(l.negative.iter().all(|v| (0.0..=0.3).contains(v)));
    }

    #[test]
    fn exact_count_flipping() {
        let l = noisy_labels(100, &cfg(), &mut seeded(2));
        assert_eq!(l.flipped.len(), 10);
        let swapped_pos = l.positive.iter().filter(|v| **v <= 0.3).count();
        let swapped_neg = l.negative.iter().filter(|v| **v >= 0.8).count();
        assert_eq!((swapped_pos, swapped_neg), (10, 10));
        for &i in &l.flipped {
            assert!(l.positive[i] <= 0.3 && l.negative[i] >= 0.8);
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.flip_fraction = 1.5;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.pos_label_range = [1.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    fn brute_mmd(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
        let k = |a: &Vec<f64>, b: &Vec<f64>| {
            let mut d = 0.0;
            for t in 0..a.len() {
                d += (a[t] - b[t]).powi(2);
            }
            (-d / (2.0 * sigma * sigma)).exp()
        };
        let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
        for a in x {
            for b in x {
                xx += k(a, b);
            }
        }
        for a in x {
            for b in y {
                xy += k(a, b);
            }
        }
        for a in y {
            for b in y {
                yy += k(a, b);
            }
        }
        let n = x.len() as f64;
        let m = y.len() as f64;
        (xx / (n * n) - 2.0 * xy / (n * m) + yy / (m * m))
            .max(0.0)
            .sqrt()
    }

    #[test]
    fn mmd_zeros_vs_ones_matches_direct_sum() {
        let x = vec![vec![0.0; 6]; 5];
        let y = vec![vec![1.0; 6]; 4];
        let got = mmd_score(&x, &y, Some(&[1.0])).unwrap();
        // Every cross pair sits at squared distance 6.
        let expect = (2.0 - 2.0 * (-3.0f64).exp()).sqrt();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - brute_mmd(&x, &y, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn mmd_of_identical_sets_vanishes_and_mismatch_errors() {
        let mut rng = seeded(3);
        let x: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..8).map(|_| rng.random::<f64>()).collect())
            .collect();
        let mut y = x.clone();
        y.reverse();
        assert!(mmd_score(&x, &y, None).unwrap() < 1e-6);
        let short = vec![vec![0.0; 3]];
        assert!(mmd_score(&x, &short, None).is_err());
        assert!(mmd_score::<Vec<f64>, Vec<f64>>(&[], &y, None).is_err());
    }

    #[test]
    fn median_heuristic_small_case() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        // distances 1, 3, 2
        assert_eq!(median_heuristic(&pts), 2.0);
    }

    #[test]
    fn constant_discriminator_gives_zero_generator_gradient() {
        let mut rng = seeded(4);
        let g = Generator::new(
            GeneratorSpec {
                latent_dim: 4,
                channels: vec![4, 2],
                output_size: 8,
                seed_side: None,
            },
            &mut rng,
        )
        .unwrap();
        let mut d = Discriminator::new(
            DiscriminatorSpec {
                channels: vec![2, 2],
                input_size: 8,
            },
            &mut rng,
        )
        .unwrap();
        let z = nn::standard_normal(3, 4, &mut rng);
        let (_, grads, _) = generator_gradients(&g, &d, &z, 3, GeneratorLoss::NonSaturating);
        assert!(grads.iter().flatten().any(|v| v.abs() > 0.0));
        // Zero the head weights: D(G(z)) is the same constant for every image.
        let head = d.params_mut().into_iter().rev().nth(1).unwrap();
        head.iter_mut().for_each(|v| *v = 0.0);
        let (_, grads, _) = generator_gradients(&g, &d, &z, 3, GeneratorLoss::NonSaturating);
        assert!(grads.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn log_round_trip() {
        let log = TrainLog {
            records: vec![EpochRecord {
                epoch: 1,
                d_loss: 1.25,
                g_loss: 0.5,
                mmd: 0.125,
                seconds: 2.0,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        log.write_jsonl(&p).unwrap();
        assert_eq!(TrainLog::read_jsonl(&p).unwrap(), log);
    }
}
