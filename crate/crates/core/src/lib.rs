//! Traffic-flow imputation with GASF-encoded daily profiles and a DCGAN.
//!
//! A day of flow counts is rescaled, padded and turned into a Gramian angular
//! summation field image. A generator trained on complete days is then searched
//! in latent space for the image whose diagonal best matches the observed part
//! of a corrupted day, and the gaps are filled from that image.

pub mod baseline;
pub mod cluster;
pub mod data;
pub mod error;
pub mod gasf;
pub mod impute;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod train;

pub use data::{DailySeries, DayClass, SensorDataset};
pub use error::{Error, ErrorKind, Result};
pub use gasf::{GasfImage, PreprocessStats};
pub use impute::{ImputationResult, LatentSearchConfig};
pub use model::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ModelCheckpoint};
pub use train::{TrainConfig, TrainLog};
