//! Generator and discriminator networks and the checkpoint container.
//!
//! Generator: `z -> linear -> BN -> lrelu -> [deconv(s=2) -> BN -> lrelu]* ->
//! deconv(s=2) -> center crop -> tanh`. Every stage doubles the spatial side,
//! starting from a seed of `ceil(output / 2^stages)`, so a 294 image with four
//! stages grows 19 -> 38 -> 76 -> 152 -> 304 and is cropped.
//!
//! Discriminator: `x -> conv(s=2) -> lrelu -> [conv(s=2) -> BN -> lrelu]* ->
//! linear -> logit`; the probability is the sigmoid of the logit.
//!
//! # Checkpoint file
//!
//! ```text
//! offset  size  content
//! 0       8     magic "GASFGANC"
//! 8       4     schema version, u32 little endian
//! 12      8     manifest length L, u64 little endian
//! 20      L     manifest, UTF-8 JSON (specs, preprocessing stats, training
//!               config, cluster/day class, tensor table)
//! 20+L    8*N   tensor payloads, f64 little endian, in tensor-table order
//! end-8   8     N (total f64 count), u64 little endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DayClass;
use crate::error::{Error, Result};
use crate::gasf::{GasfImage, PreprocessStats};
use crate::nn::{
    self, leaky_relu, leaky_relu_backward, Adam, BatchNorm, BnCache, Conv2d, ConvCache,
    ConvTranspose2d, Linear, Mode, ParamGrads, Tensor, Window,
};
use crate::rng::Rng;
use crate::train::TrainConfig;

pub const DEFAULT_LATENT_DIM: usize = 100;
const KERNEL: usize = 4;
const STRIDE2: Window = Window::new(KERNEL, 2, 1);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    /// Feature maps at the seed and after each hidden up-sampling stage. The
    /// number of stride-2 stages equals the length of this list; the last
    /// stage emits the single image channel.
    pub channels: Vec<usize>,
    pub output_size: usize,
    /// Seed side; `None` picks the smallest side that reaches `output_size`.
    #[serde(default)]
    pub seed_side: Option<usize>,
}

impl GeneratorSpec {
    /// Full-size layout: 294x294 images, 100-d latent, 512 -> 256 -> 128 -> 64.
    pub fn paper_scale(output_size: usize) -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            channels: vec![512, 256, 128, 64],
            output_size,
            seed_side: None,
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn resolved_seed_side(&self) -> usize {
        let scale = 1usize << self.stages();
        self.seed_side
            .unwrap_or_else(|| self.output_size.div_ceil(scale))
    }

    /// Side before cropping.
    pub fn full_side(&self) -> usize {
        self.resolved_seed_side() << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::ModelConfig("latent_dim must be at least 1".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::ModelConfig(format!(
                "generator channel schedule {:?} needs at least one non-zero stage",
                self.channels
            )));
        }
        if self.output_size == 0 || self.stages() > 16 {
            return Err(Error::ModelConfig(
                "output size must be positive with at most 16 stages".into(),
            ));
        }
        if self.resolved_seed_side() == 0 || self.full_side() < self.output_size {
            return Err(Error::ModelConfig(format!(
                "seed side {} with {} stride-2 stages reaches {} < output size {}",
                self.resolved_seed_side(),
                self.stages(),
                self.full_side(),
                self.output_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    /// Feature maps produced by each stride-2 convolution.
    pub channels: Vec<usize>,
    pub input_size: usize,
}

impl DiscriminatorSpec {
    pub fn paper_scale(input_size: usize) -> Self {
        Self {
            channels: vec![64, 128, 256, 512],
            input_size,
        }
    }

    /// Spatial side after each stage.
    pub fn sides(&self) -> Vec<usize> {
        let mut side = self.input_size;
        self.channels
            .iter()
            .map(|_| {
                side = STRIDE2.conv_out(side).unwrap_or(0);
                side
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::ModelConfig(format!(
                "discriminator channel schedule {:?} needs at least one non-zero stage",
                self.channels
            )));
        }
        if self.sides().contains(&0) {
            return Err(Error::ModelConfig(format!(
                "input side {} is too small for {} stride-2 stages",
                self.input_size,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

fn reshape(data: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(n, c, h, w, data)
}

fn crop_center(x: &Tensor, side: usize) -> Tensor {
    let off = (x.h - side) / 2;
    let mut out = Tensor::zeros(x.n, x.c, side, side);
    for nc in 0..x.n * x.c {
        for r in 0..side {
            let src = &x.data[(nc * x.h + r + off) * x.w + off..][..side];
            out.data[(nc * side + r) * side..][..side].copy_from_slice(src);
        }
    }
    out
}

fn uncrop_center(dy: &Tensor, full: usize) -> Tensor {
    let side = dy.h;
    let off = (full - side) / 2;
    let mut out = Tensor::zeros(dy.n, dy.c, full, full);
    for nc in 0..dy.n * dy.c {
        for r in 0..side {
            let src = &dy.data[(nc * side + r) * side..][..side];
            out.data[(nc * full + r + off) * full + off..][..side].copy_from_slice(src);
        }
    }
    out
}

fn assemble(per_layer: Vec<Option<ParamGrads>>) -> Option<Vec<Vec<f64>>> {
    per_layer.into_iter().try_fold(Vec::new(), |mut acc, g| {
        acc.extend(g?);
        Some(acc)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub spec: GeneratorSpec,
    project: Linear,
    project_bn: BatchNorm,
    ups: Vec<ConvTranspose2d>,
    bns: Vec<BatchNorm>,
}

/// Intermediate values of a generator forward pass.
pub struct GenTape {
    n: usize,
    z: Vec<f64>,
    bn0: BnCache,
    /// Inputs of each transposed convolution (post-activation).
    acts: Vec<Tensor>,
    bns: Vec<BnCache>,
    out: Tensor,
}

impl GenTape {
    pub fn bn_caches(&self) -> impl Iterator<Item = &BnCache> {
        std::iter::once(&self.bn0).chain(&self.bns)
    }
}

impl Generator {
    pub fn new(spec: GeneratorSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let seed = spec.resolved_seed_side();
        let c0 = spec.channels[0];
        let project = Linear::new(spec.latent_dim, c0 * seed * seed, false, rng);
        let project_bn = BatchNorm::new(c0, rng);
        let mut ups = Vec::new();
        let mut bns = Vec::new();
        for (i, &cin) in spec.channels.iter().enumerate() {
            let last = i + 1 == spec.stages();
            let cout = if last { 1 } else { spec.channels[i + 1] };
            let mut up = ConvTranspose2d::new(cin, cout, STRIDE2, last, rng);
            if last {
                // No normalization follows the output layer, so its scale sets
                // the initial image contrast; Glorot scaling starts it inside
                // the responsive part of tanh instead of near zero.
                let fan = ((cin + cout) * KERNEL * KERNEL) as f64;
                up.weight = nn::normal_vec(up.weight.len(), 0.0, (2.0 / fan).sqrt(), rng);
            }
            ups.push(up);
            if !last {
                bns.push(BatchNorm::new(cout, rng));
            }
        }
        Ok(Self {
            spec,
            project,
            project_bn,
            ups,
            bns,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn output_size(&self) -> usize {
        self.spec.output_size
    }

    /// Maps `n` latent rows to `n x 1 x S x S` images in `(-1, 1)`.
    pub fn forward(&self, z: &[f64], n: usize, mode: Mode) -> (Tensor, GenTape) {
        assert_eq!(z.len(), n * self.spec.latent_dim, "latent batch length");
        let seed = self.spec.resolved_seed_side();
        let h = self.project.forward(z, n);
        let h = reshape(h, n, self.spec.channels[0], seed, seed);
        let (mut a, bn0) = self.project_bn.forward(&h, mode);
        leaky_relu(&mut a.data);
        let mut acts = Vec::with_capacity(self.ups.len());
        let mut bns = Vec::with_capacity(self.bns.len());
        let mut out = None;
        for (i, up) in self.ups.iter().enumerate() {
            let y = up.forward(&a);
            acts.push(a);
            if i < self.bns.len() {
                let (mut next, cache) = self.bns[i].forward(&y, mode);
                leaky_relu(&mut next.data);
                bns.push(cache);
                a = next;
            } else {
                let mut img = crop_center(&y, self.spec.output_size);
                img.data.iter_mut().for_each(|v| *v = v.tanh());
                out = Some(img);
                break;
            }
        }
        let out = out.expect("at least one stage");
        let tape = GenTape {
            n,
            z: z.to_vec(),
            bn0,
            acts,
            bns,
            out: out.clone(),
        };
        (out, tape)
    }

    /// Evaluation-mode images.
    pub fn generate(&self, z: &[f64], n: usize) -> Tensor {
        self.forward(z, n, Mode::Eval).0
    }

    pub fn generate_images(&self, z: &[f64], n: usize) -> Vec<GasfImage> {
        let t = self.generate(z, n);
        (0..n)
            .map(|i| GasfImage::from_matrix(t.h, t.sample(i).to_vec()).expect("square output"))
            .collect()
    }

    /// Returns `dL/dz` and, when `want_params`, parameter gradients in [`params`](Self::params) order.
    pub fn backward(
        &self,
        tape: &GenTape,
        dout: &Tensor,
        want_params: bool,
    ) -> (Vec<f64>, Option<Vec<Vec<f64>>>) {
        let mut d = dout.clone();
        d.data
            .iter_mut()
            .zip(&tape.out.data)
            .for_each(|(g, y)| *g *= 1.0 - y * y);
        let mut d = uncrop_center(&d, self.spec.full_side());
        let stages = self.ups.len();
        let mut up_grads: Vec<Option<ParamGrads>> = vec![None; stages];
        let mut bn_grads: Vec<Option<ParamGrads>> = vec![None; self.bns.len()];
        for i in (0..stages).rev() {
            let (dx, g) = self.ups[i].backward(&tape.acts[i], &d, want_params);
            up_grads[i] = g;
            d = dx;
            leaky_relu_backward(&tape.acts[i].data, &mut d.data);
            if i > 0 {
                let (dx, g) = self.bns[i - 1].backward(&tape.bns[i - 1], &d, want_params);
                bn_grads[i - 1] = g;
                d = dx;
            }
        }
        let (d, bn0_grads) = self.project_bn.backward(&tape.bn0, &d, want_params);
        let (dz, proj_grads) = self.project.backward(&tape.z, &d.data, tape.n, want_params);
        let grads = want_params.then(|| {
            let mut per_layer = vec![proj_grads, bn0_grads];
            for i in 0..stages {
                per_layer.push(up_grads[i].take());
                if i < self.bns.len() {
                    per_layer.push(bn_grads[i].take());
                }
            }
            assemble(per_layer).expect("all gradients requested")
        });
        (dz, grads)
    }

    /// Folds the batch statistics of a training-mode pass into the running estimates.
    pub fn absorb(&mut self, tape: &GenTape, momentum: f64) {
        self.project_bn.absorb(&tape.bn0, momentum);
        for (bn, cache) in self.bns.iter_mut().zip(&tape.bns) {
            bn.absorb(cache, momentum);
        }
    }

    /// Replaces running statistics with those of a `batch`-sized sample of
    /// latent draws. Layer by layer this equals the population estimate for
    /// the current weights.
    pub fn calibrate(&mut self, batch: usize, rng: &mut Rng) {
        let z = nn::standard_normal(batch, self.spec.latent_dim, rng);
        let (_, tape) = self.forward(&z, batch, Mode::Train);
        self.absorb(&tape, 1.0);
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut p = self.project.params();
        p.extend(self.project_bn.params());
        for i in 0..self.ups.len() {
            p.extend(self.ups[i].params());
            if let Some(bn) = self.bns.get(i) {
                p.extend(bn.params());
            }
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut p = self.project.params_mut();
        p.extend(self.project_bn.params_mut());
        let mut bns = self.bns.iter_mut();
        for up in self.ups.iter_mut() {
            p.extend(up.params_mut());
            if let Some(bn) = bns.next() {
                p.extend(bn.params_mut());
            }
        }
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "project.weight".to_string(),
            "project_bn.gamma".into(),
            "project_bn.beta".into(),
        ];
        for i in 0..self.ups.len() {
            names.push(format!("up{i}.weight"));
            if self.ups[i].bias.is_some() {
                names.push(format!("up{i}.bias"));
            }
            if i < self.bns.len() {
                names.push(format!("up{i}_bn.gamma"));
                names.push(format!("up{i}_bn.beta"));
            }
        }
        names
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        let mut b = self.project_bn.buffers();
        self.bns.iter().for_each(|bn| b.extend(bn.buffers()));
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut b = self.project_bn.buffers_mut();
        self.bns
            .iter_mut()
            .for_each(|bn| b.extend(bn.buffers_mut()));
        b
    }

    fn buffer_names(&self) -> Vec<String> {
        let mut names = vec![
            "project_bn.running_mean".to_string(),
            "project_bn.running_var".into(),
        ];
        for i in 0..self.bns.len() {
            names.push(format!("up{i}_bn.running_mean"));
            names.push(format!("up{i}_bn.running_var"));
        }
        names
    }

    pub fn zero_parameters(&mut self) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Sets the output bias (the only bias in the generator).
    pub fn set_output_bias(&mut self, value: f64) {
        if let Some(b) = self.ups.last_mut().and_then(|u| u.bias.as_mut()) {
            b.iter_mut().for_each(|v| *v = value);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm>,
    head: Linear,
}

pub struct DiscTape {
    n: usize,
    convs: Vec<ConvCache>,
    /// Post-activation output of each stage.
    acts: Vec<Tensor>,
    bns: Vec<BnCache>,
}

impl DiscTape {
    pub fn bn_caches(&self) -> impl Iterator<Item = &BnCache> {
        self.bns.iter()
    }
}

/// Reported probabilities stay strictly inside (0, 1).
pub const PROBABILITY_FLOOR: f64 = 1e-12;

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = 1;
        for (i, &cout) in spec.channels.iter().enumerate() {
            convs.push(Conv2d::new(cin, cout, STRIDE2, i == 0, rng));
            if i > 0 {
                bns.push(BatchNorm::new(cout, rng));
            }
            cin = cout;
        }
        let side = *spec.sides().last().expect("validated");
        let head = Linear::new(cin * side * side, 1, true, rng);
        Ok(Self {
            spec,
            convs,
            bns,
            head,
        })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.spec.input_size;
        if x.c != 1 || x.h != s || x.w != s {
            return Err(Error::ShapeMismatch {
                expected: format!("N x 1 x {s} x {s}"),
                actual: format!("N x {} x {} x {}", x.c, x.h, x.w),
            });
        }
        Ok(())
    }

    /// One logit per sample. Panics on a shape mismatch; use [`check_input`](Self::check_input) first
    /// for untrusted tensors.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> (Vec<f64>, DiscTape) {
        self.check_input(x).expect("discriminator input shape");
        let mut caches = Vec::new();
        let mut acts = Vec::new();
        let mut bns = Vec::new();
        let mut a = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (mut y, cache) = conv.forward(&a);
            caches.push(cache);
            if i > 0 {
                let (yn, bc) = self.bns[i - 1].forward(&y, mode);
                bns.push(bc);
                y = yn;
            }
            leaky_relu(&mut y.data);
            acts.push(y.clone());
            a = y;
        }
        let logits = self.head.forward(&a.data, x.n);
        (
            logits,
            DiscTape {
                n: x.n,
                convs: caches,
                acts,
                bns,
            },
        )
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (logits, _) = self.forward(x, Mode::Eval);
        Ok(logits
            .into_iter()
            .map(|l| nn::sigmoid(l).clamp(PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR))
            .collect())
    }

    /// Returns `dL/dx` and optionally parameter gradients in [`params`](Self::params) order.
    pub fn backward(
        &self,
        tape: &DiscTape,
        dlogits: &[f64],
        want_params: bool,
    ) -> (Tensor, Option<Vec<Vec<f64>>>) {
        let last = tape.acts.last().expect("at least one stage");
        let (dflat, head_grads) = self.head.backward(&last.data, dlogits, tape.n, want_params);
        let mut d = Tensor::from_vec(last.n, last.c, last.h, last.w, dflat);
        let stages = self.convs.len();
        let mut conv_grads: Vec<Option<ParamGrads>> = vec![None; stages];
        let mut bn_grads: Vec<Option<ParamGrads>> = vec![None; self.bns.len()];
        for i in (0..stages).rev() {
            leaky_relu_backward(&tape.acts[i].data, &mut d.data);
            if i > 0 {
                let (dx, g) = self.bns[i - 1].backward(&tape.bns[i - 1], &d, want_params);
                bn_grads[i - 1] = g;
                d = dx;
            }
            let (dx, g) = self.convs[i].backward(&tape.convs[i], &d, want_params);
            conv_grads[i] = g;
            d = dx;
        }
        let grads = want_params.then(|| {
            let mut per_layer = Vec::new();
            for i in 0..stages {
                per_layer.push(conv_grads[i].take());
                if i > 0 {
                    per_layer.push(bn_grads[i - 1].take());
                }
            }
            per_layer.push(head_grads);
            assemble(per_layer).expect("all gradients requested")
        });
        (d, grads)
    }

    pub fn absorb(&mut self, tape: &DiscTape, momentum: f64) {
        for (bn, cache) in self.bns.iter_mut().zip(&tape.bns) {
            bn.absorb(cache, momentum);
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut p = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            p.extend(conv.params());
            if i > 0 {
                p.extend(self.bns[i - 1].params());
            }
        }
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut p = Vec::new();
        let mut bns = self.bns.iter_mut();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            p.extend(conv.params_mut());
            if i > 0 {
                p.extend(bns.next().expect("bn per hidden stage").params_mut());
            }
        }
        p.extend(self.head.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            names.push(format!("conv{i}.weight"));
            if conv.bias.is_some() {
                names.push(format!("conv{i}.bias"));
            }
            if i > 0 {
                names.push(format!("conv{i}_bn.gamma"));
                names.push(format!("conv{i}_bn.beta"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        self.bns.iter().flat_map(|bn| bn.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.bns
            .iter_mut()
            .flat_map(|bn| bn.buffers_mut())
            .collect()
    }

    fn buffer_names(&self) -> Vec<String> {
        (1..self.convs.len())
            .flat_map(|i| {
                [
                    format!("conv{i}_bn.running_mean"),
                    format!("conv{i}_bn.running_var"),
                ]
            })
            .collect()
    }
}

/// Converts images to a `n x 1 x S x S` tensor.
pub fn images_to_tensor(images: &[&GasfImage]) -> Result<Tensor> {
    let side = images.first().map_or(0, |i| i.side);
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        if img.side != side {
            return Err(Error::ShapeMismatch {
                expected: format!("{side}x{side}"),
                actual: format!("{0}x{0}", img.side),
            });
        }
        data.extend_from_slice(&img.matrix);
    }
    Ok(Tensor::from_vec(images.len(), 1, side, side, data))
}

/// Adam moments for both networks, kept so interrupted training resumes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub generator: Adam,
    pub discriminator: Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub stats: PreprocessStats,
    pub train_config: TrainConfig,
    pub cluster_id: Option<usize>,
    pub day_class: Option<DayClass>,
    pub epochs_completed: usize,
    pub optimizer: Option<OptimizerState>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GASFGANC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct AdamScalars {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema: String,
    schema_version: u32,
    generator: GeneratorSpec,
    discriminator: DiscriminatorSpec,
    stats: PreprocessStats,
    train_config: TrainConfig,
    cluster_id: Option<usize>,
    day_class: Option<DayClass>,
    epochs_completed: usize,
    optimizer: Option<[AdamScalars; 2]>,
    tensors: Vec<TensorEntry>,
}

impl ModelCheckpoint {
    fn tensor_table(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        let g = &self.generator;
        out.extend(
            g.param_names()
                .into_iter()
                .map(|n| format!("generator.{n}"))
                .zip(g.params()),
        );
        out.extend(
            g.buffer_names()
                .into_iter()
                .map(|n| format!("generator.{n}"))
                .zip(g.buffers()),
        );
        let d = &self.discriminator;
        out.extend(
            d.param_names()
                .into_iter()
                .map(|n| format!("discriminator.{n}"))
                .zip(d.params()),
        );
        out.extend(
            d.buffer_names()
                .into_iter()
                .map(|n| format!("discriminator.{n}"))
                .zip(d.buffers()),
        );
        if let Some(opt) = &self.optimizer {
            for (tag, adam) in [
                ("generator", &opt.generator),
                ("discriminator", &opt.discriminator),
            ] {
                for (i, m) in adam.m.iter().enumerate() {
                    out.push((format!("adam.{tag}.m{i}"), m));
                }
                for (i, v) in adam.v.iter().enumerate() {
                    out.push((format!("adam.{tag}.v{i}"), v));
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let table = self.tensor_table();
        let scalars = |a: &Adam| AdamScalars {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
        };
        let manifest = Manifest {
            schema: "gasfgan.checkpoint".into(),
            schema_version: CHECKPOINT_VERSION,
            generator: self.generator.spec.clone(),
            discriminator: self.discriminator.spec.clone(),
            stats: self.stats,
            train_config: self.train_config.clone(),
            cluster_id: self.cluster_id,
            day_class: self.day_class,
            epochs_completed: self.epochs_completed,
            optimizer: self
                .optimizer
                .as_ref()
                .map(|o| [scalars(&o.generator), scalars(&o.discriminator)]),
            tensors: table
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    len: t.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            let mut count: u64 = 0;
            for (_, t) in &table {
                for v in t.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
                count += t.len() as u64;
            }
            w.write_all(&count.to_le_bytes())?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| corrupt("truncated"))?;
        let json = body
            .get(..mlen)
            .ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| corrupt(&format!("manifest: {e}")))?;
        if manifest.schema_version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleVersion {
                found: manifest.schema_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
        let payload = &body[mlen..];
        if payload.len() != 8 * total + 8 {
            return Err(corrupt(&format!(
                "expected {} payload bytes, found {}",
                8 * total + 8,
                payload.len()
            )));
        }
        let trailer = u64::from_le_bytes(payload[8 * total..].try_into().expect("8 bytes"));
        if trailer as usize != total {
            return Err(corrupt("payload count trailer mismatch"));
        }
        let mut values = payload[..8 * total]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));

        // Build the networks for their shapes, then overwrite every tensor.
        let mut rng = crate::rng::seeded(0);
        let generator = Generator::new(manifest.generator.clone(), &mut rng)?;
        let discriminator = Discriminator::new(manifest.discriminator.clone(), &mut rng)?;
        let optimizer = manifest.optimizer.as_ref().map(|[g, d]| {
            let adam = |s: &AdamScalars, shapes: Vec<usize>| {
                let mut a = Adam::new(s.lr, s.beta1, s.beta2, &shapes);
                a.eps = s.eps;
                a.step = s.step;
                a
            };
            OptimizerState {
                generator: adam(g, generator.params().iter().map(|p| p.len()).collect()),
                discriminator: adam(d, discriminator.params().iter().map(|p| p.len()).collect()),
            }
        });
        let mut ckpt = ModelCheckpoint {
            generator,
            discriminator,
            stats: manifest.stats,
            train_config: manifest.train_config,
            cluster_id: manifest.cluster_id,
            day_class: manifest.day_class,
            epochs_completed: manifest.epochs_completed,
            optimizer,
        };
        let expected: Vec<(String, usize)> = ckpt
            .tensor_table()
            .into_iter()
            .map(|(n, t)| (n, t.len()))
            .collect();
        if expected.len() != manifest.tensors.len()
            || expected
                .iter()
                .zip(&manifest.tensors)
                .any(|((n, l), e)| *n != e.name || *l != e.len)
        {
            return Err(corrupt(
                "tensor table does not match the declared architecture",
            ));
        }
        let mut fill = |slots: Vec<&mut Vec<f64>>| {
            for slot in slots {
                for v in slot.iter_mut() {
                    *v = values.next().expect("length checked");
                }
            }
        };
        fill(ckpt.generator.params_mut());
        fill(ckpt.generator.buffers_mut());
        fill(ckpt.discriminator.params_mut());
        fill(ckpt.discriminator.buffers_mut());
        if let Some(opt) = ckpt.optimizer.as_mut() {
            for adam in [&mut opt.generator, &mut opt.discriminator] {
                fill(adam.m.iter_mut().collect());
                fill(adam.v.iter_mut().collect());
            }
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    pub(crate) fn small_gen(output: usize) -> GeneratorSpec {
        GeneratorSpec {
            latent_dim: 8,
            channels: vec![8, 4],
            output_size: output,
            seed_side: None,
        }
    }

    #[test]
    fn paper_scale_geometry() {
        let g = GeneratorSpec::paper_scale(294);
        assert_eq!(g.resolved_seed_side(), 19);
        assert_eq!(g.full_side(), 304);
        let d = DiscriminatorSpec::paper_scale(294);
        assert_eq!(d.sides(), vec![147, 73, 36, 18]);
    }

    #[test]
    fn generator_output_shape_and_range() {
        let mut rng = seeded(1);
        let g = Generator::new(small_gen(14), &mut rng).unwrap();
        let z = nn::standard_normal(3, 8, &mut rng);
        let (out, _) = g.forward(&z, 3, Mode::Train);
        assert_eq!((out.n, out.c, out.h, out.w), (3, 1, 14, 14));
        assert!(out.data.iter().all(|v| v.abs() < 1.0));
        let a = g.generate(&z, 3);
        let b = g.generate(&z, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_schedule_is_a_config_error() {
        let mut spec = small_gen(40);
        spec.seed_side = Some(3);
        assert!(matches!(
            Generator::new(spec, &mut seeded(0)),
            Err(Error::ModelConfig(_))
        ));
        let mut spec = small_gen(40);
        spec.channels.clear();
        assert!(Generator::new(spec, &mut seeded(0)).is_err());
        let spec = DiscriminatorSpec {
            channels: vec![4, 4, 4],
            input_size: 3,
        };
        assert!(Discriminator::new(spec, &mut seeded(0)).is_err());
    }

    #[test]
    fn zeroed_generator_is_constant_tanh_of_bias() {
        let mut g = Generator::new(small_gen(10), &mut seeded(2)).unwrap();
        g.zero_parameters();
        g.set_output_bias(0.3);
        let z = nn::standard_normal(2, 8, &mut seeded(3));
        let out = g.generate(&z, 2);
        assert!(out.data.iter().all(|v| (v - 0.3f64.tanh()).abs() < 1e-15));
    }

    #[test]
    fn discriminator_batches_and_rejects_bad_shapes() {
        let mut rng = seeded(4);
        let d = Discriminator::new(
            DiscriminatorSpec {
                channels: vec![4, 8],
                input_size: 12,
            },
            &mut rng,
        )
        .unwrap();
        let x = Tensor::from_vec(5, 1, 12, 12, nn::standard_normal(5, 144, &mut rng));
        let p = d.probabilities(&x).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = Tensor::zeros(1, 1, 10, 10);
        assert!(matches!(
            d.probabilities(&bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], idx: &[usize], tol: f64) {
        for &i in idx {
            let h = 1e-6;
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(err < tol, "index {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    #[test]
    fn discriminator_input_gradient_matches_finite_differences() {
        let mut rng = seeded(5);
        let d = Discriminator::new(
            DiscriminatorSpec {
                channels: vec![3, 4],
                input_size: 10,
            },
            &mut rng,
        )
        .unwrap();
        let x = Tensor::from_vec(2, 1, 10, 10, nn::standard_normal(2, 100, &mut rng));
        for mode in [Mode::Eval, Mode::Train] {
            let (_, tape) = d.forward(&x, mode);
            let (dx, grads) = d.backward(&tape, &[1.0, 1.0], true);
            assert!(dx.data.iter().all(|v| v.is_finite()));
            let f = |xv: &[f64]| {
                let t = Tensor::from_vec(2, 1, 10, 10, xv.to_vec());
                d.forward(&t, mode).0.iter().sum::<f64>()
            };
            fd_check(f, &x.data, &dx.data, &[3, 47, 88, 120, 199], 1e-5);
            let grads = grads.unwrap();
            assert_eq!(grads.len(), d.params().len());
            for (g, p) in grads.iter().zip(d.params()) {
                assert_eq!(g.len(), p.len());
            }
        }
    }

    #[test]
    fn generator_latent_gradient_matches_finite_differences() {
        let mut rng = seeded(6);
        let g = Generator::new(small_gen(9), &mut rng).unwrap();
        let z = nn::standard_normal(2, 8, &mut rng);
        let probe = Tensor::from_vec(2, 1, 9, 9, nn::standard_normal(2, 81, &mut rng));
        for mode in [Mode::Eval, Mode::Train] {
            let (_, tape) = g.forward(&z, 2, mode);
            let (dz, grads) = g.backward(&tape, &probe, true);
            let f = |zv: &[f64]| {
                let (o, _) = g.forward(zv, 2, mode);
                o.data
                    .iter()
                    .zip(&probe.data)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            fd_check(f, &z, &dz, &[0, 3, 9, 15], 1e-5);
            let grads = grads.unwrap();
            assert_eq!(grads.len(), g.params().len());
            assert_eq!(g.param_names().len(), grads.len());
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = seeded(7);
        let gen = Generator::new(small_gen(12), &mut rng).unwrap();
        let disc = Discriminator::new(
            DiscriminatorSpec {
                channels: vec![2, 4],
                input_size: 12,
            },
            &mut rng,
        )
        .unwrap();
        let gshapes: Vec<usize> = gen.params().iter().map(|p| p.len()).collect();
        let dshapes: Vec<usize> = disc.params().iter().map(|p| p.len()).collect();
        let mut opt_g = Adam::new(2e-4, 0.5, 0.999, &gshapes);
        opt_g.step = 17;
        opt_g.m[0][0] = 0.123;
        let ckpt = ModelCheckpoint {
            generator: gen,
            discriminator: disc,
            stats: PreprocessStats::new(0.25, 5.5, 3).unwrap(),
            train_config: TrainConfig::default(),
            cluster_id: Some(2),
            day_class: Some(DayClass::NonWeekday),
            epochs_completed: 4,
            optimizer: Some(OptimizerState {
                generator: opt_g,
                discriminator: Adam::new(2e-4, 0.5, 0.999, &dshapes),
            }),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.stats.vmin, 0.25);
        assert_eq!(back.stats.vmax, 5.5);

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 100];
        assert!(matches!(
            ModelCheckpoint::from_bytes(truncated),
            Err(Error::CorruptCheckpoint(_))
        ));
        let mut wrong = bytes.clone();
        wrong[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            ModelCheckpoint::from_bytes(&wrong),
            Err(Error::IncompatibleVersion { found: 9, .. })
        ));
        assert!(ModelCheckpoint::from_bytes(b"nonsense").is_err());
    }
}
