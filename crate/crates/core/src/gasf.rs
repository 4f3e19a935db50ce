//! Gramian Angular Summation Field encoding of daily series.
//!
//! Raw counts are mapped to `[0, 1]` by `x = (ln(max-one(v)) - vmin) / (vmax - vmin)`,
//! where zeros are first replaced by one. The normalized series is padded by
//! repeating its end points, each value becomes an angle `phi = acos(x)`, and
//! the image is `G[i][j] = cos(phi_i + phi_j)`. Because `phi` lies in
//! `[0, pi/2]` the diagonal `cos(2 phi)` determines `x = sqrt((G[i][i] + 1) / 2)`
//! exactly, which is how generated images are turned back into series.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DailySeries;
use crate::error::{Error, Result};

pub const DEFAULT_PAD: usize = 3;
pub const DEFAULT_SMOOTHING_SIGMA: f64 = 1.0;

const DOMAIN_TOL: f64 = 1e-9;
const DIAGONAL_TOL: f64 = 1e-6;

/// Log-domain range used to rescale raw flows, plus the replicate padding width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub vmin: f64,
    pub vmax: f64,
    pub pad: usize,
}

fn log_flow(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.ln()
    }
}

impl PreprocessStats {
    pub fn new(vmin: f64, vmax: f64, pad: usize) -> Result<Self> {
        if !(vmin.is_finite() && vmax.is_finite()) || vmax <= vmin {
            return Err(Error::DegenerateRange { vmin, vmax });
        }
        Ok(Self { vmin, vmax, pad })
    }

    /// Fits the log-domain range over the observed intervals of all `series`.
    pub fn fit<'a>(series: impl IntoIterator<Item = &'a DailySeries>, pad: usize) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in series {
            for (&v, &m) in s.values.iter().zip(&s.mask) {
                if m {
                    let l = log_flow(v);
                    lo = lo.min(l);
                    hi = hi.max(l);
                }
            }
        }
        if lo > hi {
            return Err(Error::EmptyInput(
                "no observed values to fit preprocessing range".into(),
            ));
        }
        Self::new(lo, hi, pad)
    }

    /// Raw flow to `[0, 1]`, clipping outside the fitted range.
    pub fn normalize(&self, raw: f64) -> f64 {
        ((log_flow(raw) - self.vmin) / (self.vmax - self.vmin)).clamp(0.0, 1.0)
    }

    /// Inverse of [`normalize`](Self::normalize) on `[0, 1]`; never negative.
    pub fn restore(&self, x: f64) -> f64 {
        (self.vmin + x * (self.vmax - self.vmin)).exp()
    }
}

/// A rescaled series including its replicate padding.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    pub values: Vec<f64>,
    pub stats: PreprocessStats,
}

impl NormalizedSeries {
    pub fn unpadded(&self) -> &[f64] {
        let p = self.stats.pad;
        &self.values[p..self.values.len() - p]
    }
}

/// Rescales and pads a series. With `stats == None` the range is fit on this
/// series alone using [`DEFAULT_PAD`].
pub fn preprocess(
    series: &DailySeries,
    stats: Option<&PreprocessStats>,
) -> Result<(NormalizedSeries, PreprocessStats)> {
    let stats = match stats {
        Some(s) => *s,
        None => PreprocessStats::fit([series], DEFAULT_PAD)?,
    };
    for (t, &v) in series.values.iter().enumerate() {
        if series.mask[t] && !(v.is_finite() && v >= 0.0) {
            return Err(Error::Domain { index: t, value: v });
        }
    }
    let normalized: Vec<f64> = series
        .values
        .iter()
        .zip(&series.mask)
        .map(|(&v, &m)| if m { stats.normalize(v) } else { 0.0 })
        .collect();
    let values = pad_replicate(&normalized, stats.pad);
    Ok((NormalizedSeries { values, stats }, stats))
}

/// Repeats the first and last entries `pad` times at the head and tail.
pub fn pad_replicate(values: &[f64], pad: usize) -> Vec<f64> {
    let (Some(&first), Some(&last)) = (values.first(), values.last()) else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(values.len() + 2 * pad);
    out.extend(std::iter::repeat_n(first, pad));
    out.extend_from_slice(values);
    out.extend(std::iter::repeat_n(last, pad));
    out
}

/// Square GASF matrix with the polar coordinates it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasfImage {
    pub side: usize,
    /// Row-major `side * side` entries.
    pub matrix: Vec<f64>,
    pub angles: Vec<f64>,
    /// `r_i = (i + 1) / side`. Carried for completeness; the matrix ignores it.
    pub radius: Vec<f64>,
}

fn radius_for(side: usize) -> Vec<f64> {
    (1..=side).map(|i| i as f64 / side as f64).collect()
}

impl GasfImage {
    /// Wraps an arbitrary square matrix (for example a generator output).
    /// Angles are recovered from the diagonal.
    pub fn from_matrix(side: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != side * side {
            return Err(Error::ShapeMismatch {
                expected: format!("{side}x{side}"),
                actual: format!("{} entries", matrix.len()),
            });
        }
        let angles = (0..side)
            .map(|i| matrix[i * side + i].clamp(-1.0, 1.0).acos() / 2.0)
            .collect();
        Ok(Self {
            side,
            matrix,
            angles,
            radius: radius_for(side),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.side + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.side).map(|i| self.get(i, i)).collect()
    }

    pub fn to_gray(&self) -> image::GrayImage {
        let side = self.side as u32;
        image::GrayImage::from_fn(side, side, |x, y| {
            let v = self.get(y as usize, x as usize).clamp(-1.0, 1.0);
            image::Luma([((v + 1.0) / 2.0 * 255.0).round() as u8])
        })
    }

    /// Writes a binary PGM with `[-1, 1]` mapped linearly onto `[0, 255]`.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
        use image::ImageEncoder;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let gray = self.to_gray();
        PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(
                gray.as_raw(),
                gray.width(),
                gray.height(),
                image::ExtendedColorType::L8,
            )?;
        Ok(())
    }
}

/// Builds the GASF matrix of a normalized (padded) series.
pub fn encode(normalized: &NormalizedSeries) -> Result<GasfImage> {
    encode_values(&normalized.values)
}

/// [`encode`] on a bare slice of `[0, 1]` values.
pub fn encode_values(values: &[f64]) -> Result<GasfImage> {
    let mut angles = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&v) {
            return Err(Error::Domain { index, value: v });
        }
        angles.push(v.clamp(0.0, 1.0).acos());
    }
    let side = values.len();
    let mut matrix = vec![0.0; side * side];
    for i in 0..side {
        for j in i..side {
            let g = (angles[i] + angles[j]).cos();
            matrix[i * side + j] = g;
            matrix[j * side + i] = g;
        }
    }
    Ok(GasfImage {
        side,
        matrix,
        angles,
        radius: radius_for(side),
    })
}

/// `x = sqrt((d + 1) / 2)` for one diagonal entry, clamping rounding excursions.
pub fn diagonal_to_value(d: f64) -> f64 {
    ((d.clamp(-1.0, 1.0) + 1.0) / 2.0).sqrt()
}

/// Normalized values recovered from the diagonal, padding stripped.
pub fn decode_normalized(image: &GasfImage, pad: usize) -> Result<Vec<f64>> {
    if image.side < 2 * pad + 1 {
        return Err(Error::ShapeMismatch {
            expected: format!("side > {}", 2 * pad),
            actual: image.side.to_string(),
        });
    }
    (pad..image.side - pad)
        .map(|i| {
            let d = image.get(i, i);
            if !(-1.0 - DIAGONAL_TOL..=1.0 + DIAGONAL_TOL).contains(&d) {
                return Err(Error::CorruptImage { index: i, value: d });
            }
            Ok(diagonal_to_value(d))
        })
        .collect()
}

/// Raw flow counts recovered from an image.
pub fn decode(image: &GasfImage, stats: &PreprocessStats) -> Result<Vec<f64>> {
    Ok(decode_normalized(image, stats.pad)?
        .into_iter()
        .map(|x| stats.restore(x))
        .collect())
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-0.5 * (x as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable 2-D Gaussian blur, truncated at 4 sigma, mirror-reflecting at the
/// borders. `sigma == 0` returns the input unchanged.
pub fn gaussian_smooth(image: &GasfImage, sigma: f64) -> Result<GasfImage> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma {sigma} must be finite and >= 0"
        )));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let n = image.side;
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let blur = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for (o, &w) in kernel.iter().enumerate() {
                    let k = reflect_index(
                        if along_rows { j } else { i } as isize + o as isize - radius,
                        n,
                    );
                    acc += w * if along_rows {
                        src[i * n + k]
                    } else {
                        src[k * n + j]
                    };
                }
                out[i * n + j] = acc;
            }
        }
        out
    };
    let tmp = blur(&image.matrix, true);
    let mut out = blur(&tmp, false);
    out.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    GasfImage::from_matrix(n, out)
}
