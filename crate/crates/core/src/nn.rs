//! Small CPU layer library with explicit backward passes.
//!
//! Forward passes take `&self` and return a cache; backward passes consume
//! that cache and return the input gradient plus, on request, the parameter
//! gradients in the layer's parameter order. Nothing is accumulated inside
//! the layers, so a frozen model can be shared across threads.
//!
//! Activations are stored NCHW in flat `Vec<f64>` buffers.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

pub const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }
}

/// `C = beta * C + op(A) * op(B)` on row-major buffers, where `op(A)` is `m x k`
/// and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output side of a strided convolution, or `None` if the window does not fit.
    pub fn conv_out(&self, side: usize) -> Option<usize> {
        let padded = side + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// Output side of the transposed convolution.
    pub fn deconv_out(&self, side: usize) -> Option<usize> {
        ((side - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Unfolds `x` (`c x h x w`) into columns of shape `(c*k*k) x (ho*wo)`.
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let k = win.kernel;
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ki) as isize - win.padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - win.padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let k = win.kernel;
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ki) as isize - win.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - win.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn normal_vec(len: usize, mean: f64, std: f64, rng: &mut Rng) -> Vec<f64> {
    let dist = Normal::new(mean, std).expect("valid normal");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Per-layer parameter gradients, in the layer's parameter order.
pub type ParamGrads = Vec<Vec<f64>>;

/// Fully connected layer, `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, bias: bool, rng: &mut Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: normal_vec(inputs * outputs, 0.0, INIT_STD, rng),
            bias: bias.then(|| vec![0.0; outputs]),
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * self.outputs];
        gemm(
            n,
            self.inputs,
            self.outputs,
            x,
            false,
            &self.weight,
            true,
            0.0,
            &mut y,
        );
        if let Some(b) = &self.bias {
            for row in y.chunks_mut(self.outputs) {
                row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
        }
        y
    }

    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        n: usize,
        want: bool,
    ) -> (Vec<f64>, Option<ParamGrads>) {
        let mut dx = vec![0.0; n * self.inputs];
        gemm(
            n,
            self.outputs,
            self.inputs,
            dy,
            false,
            &self.weight,
            false,
            0.0,
            &mut dx,
        );
        let grads = want.then(|| {
            let mut dw = vec![0.0; self.weight.len()];
            gemm(
                self.outputs,
                n,
                self.inputs,
                dy,
                true,
                x,
                false,
                0.0,
                &mut dw,
            );
            let mut g = vec![dw];
            if self.bias.is_some() {
                let mut db = vec![0.0; self.outputs];
                for row in dy.chunks(self.outputs) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                g.push(db);
            }
            g
        });
        (dx, grads)
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        std::iter::once(&self.weight)
            .chain(self.bias.as_ref())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    for (ch, b) in y.chunks_mut(plane).zip(bias.iter().cycle()) {
        ch.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(dy: &Tensor) -> Vec<f64> {
    let plane = dy.h * dy.w;
    let mut db = vec![0.0; dy.c];
    for (i, ch) in dy.data.chunks(plane).enumerate() {
        db[i % dy.c] += ch.iter().sum::<f64>();
    }
    db
}

/// Strided convolution. Weight layout `cout x (cin*k*k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub window: Window,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, window: Window, bias: bool, rng: &mut Rng) -> Self {
        let k = window.kernel;
        Self {
            cin,
            cout,
            window,
            weight: normal_vec(cout * cin * k * k, 0.0, INIT_STD, rng),
            bias: bias.then(|| vec![0.0; cout]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let ho = self.window.conv_out(x.h).expect("conv window fits");
        let wo = self.window.conv_out(x.w).expect("conv window fits");
        let kk = self.cin * self.window.kernel * self.window.kernel;
        let hw = ho * wo;
        let mut cols = vec![0.0; x.n * kk * hw];
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        for i in 0..x.n {
            let col = &mut cols[i * kk * hw..(i + 1) * kk * hw];
            im2col(x.sample(i), x.c, x.h, x.w, self.window, ho, wo, col);
            let out = &mut y.data[i * self.cout * hw..(i + 1) * self.cout * hw];
            gemm(self.cout, kk, hw, &self.weight, false, col, false, 0.0, out);
        }
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y.data, b, hw);
        }
        (
            y,
            ConvCache {
                cols,
                in_shape: (x.n, x.c, x.h, x.w),
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Tensor,
        want: bool,
    ) -> (Tensor, Option<ParamGrads>) {
        let (n, c, h, w) = cache.in_shape;
        let kk = self.cin * self.window.kernel * self.window.kernel;
        let hw = dy.h * dy.w;
        let mut dx = Tensor::zeros(n, c, h, w);
        let mut dcol = vec![0.0; kk * hw];
        let mut dw = want.then(|| vec![0.0; self.weight.len()]);
        for i in 0..n {
            let g = dy.sample(i);
            gemm(
                kk,
                self.cout,
                hw,
                &self.weight,
                true,
                g,
                false,
                0.0,
                &mut dcol,
            );
            let l = c * h * w;
            col2im(
                &dcol,
                c,
                h,
                w,
                self.window,
                dy.h,
                dy.w,
                &mut dx.data[i * l..(i + 1) * l],
            );
            if let Some(dw) = dw.as_mut() {
                let col = &cache.cols[i * kk * hw..(i + 1) * kk * hw];
                gemm(self.cout, hw, kk, g, false, col, true, 1.0, dw);
            }
        }
        let grads = dw.map(|dw| {
            let mut g = vec![dw];
            if self.bias.is_some() {
                g.push(channel_sums(dy));
            }
            g
        });
        (dx, grads)
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        std::iter::once(&self.weight)
            .chain(self.bias.as_ref())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

/// Fractionally strided (transposed) convolution. Weight layout `cin x (cout*k*k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub cin: usize,
    pub cout: usize,
    pub window: Window,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvTranspose2d {
    pub fn new(cin: usize, cout: usize, window: Window, bias: bool, rng: &mut Rng) -> Self {
        let k = window.kernel;
        Self {
            cin,
            cout,
            window,
            weight: normal_vec(cin * cout * k * k, 0.0, INIT_STD, rng),
            bias: bias.then(|| vec![0.0; cout]),
        }
    }

    /// The caller keeps `x`; it is the only thing backward needs.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "deconv input channels");
        let ho = self.window.deconv_out(x.h).expect("deconv geometry");
        let wo = self.window.deconv_out(x.w).expect("deconv geometry");
        let kk = self.cout * self.window.kernel * self.window.kernel;
        let hw_in = x.h * x.w;
        let mut col = vec![0.0; kk * hw_in];
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        let l = self.cout * ho * wo;
        for i in 0..x.n {
            gemm(
                kk,
                self.cin,
                hw_in,
                &self.weight,
                true,
                x.sample(i),
                false,
                0.0,
                &mut col,
            );
            col2im(
                &col,
                self.cout,
                ho,
                wo,
                self.window,
                x.h,
                x.w,
                &mut y.data[i * l..(i + 1) * l],
            );
        }
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y.data, b, ho * wo);
        }
        y
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, want: bool) -> (Tensor, Option<ParamGrads>) {
        let kk = self.cout * self.window.kernel * self.window.kernel;
        let hw_in = x.h * x.w;
        let mut dcol = vec![0.0; kk * hw_in];
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut dw = want.then(|| vec![0.0; self.weight.len()]);
        let l = self.cin * hw_in;
        for i in 0..x.n {
            im2col(
                dy.sample(i),
                self.cout,
                dy.h,
                dy.w,
                self.window,
                x.h,
                x.w,
                &mut dcol,
            );
            gemm(
                self.cin,
                kk,
                hw_in,
                &self.weight,
                false,
                &dcol,
                false,
                0.0,
                &mut dx.data[i * l..(i + 1) * l],
            );
            if let Some(dw) = dw.as_mut() {
                gemm(
                    self.cin,
                    hw_in,
                    kk,
                    x.sample(i),
                    false,
                    &dcol,
                    true,
                    1.0,
                    dw,
                );
            }
        }
        let grads = dw.map(|dw| {
            let mut g = vec![dw];
            if self.bias.is_some() {
                g.push(channel_sums(dy));
            }
            g
        });
        (dx, grads)
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        std::iter::once(&self.weight)
            .chain(self.bias.as_ref())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

/// How batch normalization obtains its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Per-channel batch normalization over the N, H and W axes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        Self {
            channels,
            gamma: normal_vec(channels, 1.0, INIT_STD, rng),
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, BnCache) {
        assert_eq!(x.c, self.channels, "batch norm channels");
        let plane = x.h * x.w;
        let count = (x.n * plane) as f64;
        let mut mean = vec![0.0; x.c];
        let mut var = vec![0.0; x.c];
        if mode == Mode::Train {
            for (i, ch) in x.data.chunks(plane).enumerate() {
                mean[i % x.c] += ch.iter().sum::<f64>();
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for (i, ch) in x.data.chunks(plane).enumerate() {
                let m = mean[i % x.c];
                var[i % x.c] += ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            var.iter_mut().for_each(|v| *v /= count);
        }
        let (use_mean, use_var) = match mode {
            Mode::Train => (&mean, &var),
            Mode::Eval => (&self.running_mean, &self.running_var),
        };
        let inv_std: Vec<f64> = use_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let mut xhat = vec![0.0; x.data.len()];
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        for (i, (src, (xh, dst))) in x
            .data
            .chunks(plane)
            .zip(xhat.chunks_mut(plane).zip(y.data.chunks_mut(plane)))
            .enumerate()
        {
            let ch = i % x.c;
            let (m, s, g, b) = (use_mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
            for ((v, h), o) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                *h = (v - m) * s;
                *o = g * *h + b;
            }
        }
        let unbias = if count > 1.0 {
            count / (count - 1.0)
        } else {
            1.0
        };
        let batch_var = var.iter().map(|v| v * unbias).collect();
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mode,
                batch_mean: mean,
                batch_var,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BnCache,
        dy: &Tensor,
        want: bool,
    ) -> (Tensor, Option<ParamGrads>) {
        let plane = dy.h * dy.w;
        let c = dy.c;
        let count = (dy.n * plane) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, (g, h)) in dy
            .data
            .chunks(plane)
            .zip(cache.xhat.chunks(plane))
            .enumerate()
        {
            dbeta[i % c] += g.iter().sum::<f64>();
            dgamma[i % c] += g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for (i, ((g, h), out)) in dy
            .data
            .chunks(plane)
            .zip(cache.xhat.chunks(plane))
            .zip(dx.data.chunks_mut(plane))
            .enumerate()
        {
            let ch = i % c;
            let scale = self.gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Eval => {
                    out.iter_mut().zip(g).for_each(|(o, gv)| *o = scale * gv);
                }
                Mode::Train => {
                    let mean_g = dbeta[ch] / count;
                    let mean_gh = dgamma[ch] / count;
                    for ((o, gv), hv) in out.iter_mut().zip(g).zip(h) {
                        *o = scale * (gv - mean_g - hv * mean_gh);
                    }
                }
            }
        }
        (dx, want.then(|| vec![dgamma, dbeta]))
    }

    /// Blends batch statistics into the running estimates.
    pub fn absorb(&mut self, cache: &BnCache, momentum: f64) {
        for ch in 0..self.channels {
            self.running_mean[ch] =
                (1.0 - momentum) * self.running_mean[ch] + momentum * cache.batch_mean[ch];
            self.running_var[ch] =
                (1.0 - momentum) * self.running_var[ch] + momentum * cache.batch_var[ch];
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn buffers(&self) -> Vec<&Vec<f64>> {
        vec![&self.running_mean, &self.running_var]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

pub fn leaky_relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE
        }
    });
}

/// Gradient through a leaky rectifier given its output (the sign is preserved).
pub fn leaky_relu_backward(out: &[f64], dy: &mut [f64]) {
    dy.iter_mut().zip(out).for_each(|(g, &o)| {
        if o < 0.0 {
            *g *= LEAKY_SLOPE
        }
    });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&l| vec![0.0; l]).collect(),
            v: shapes.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Standard normal draws, `n` rows of `dim`.
pub fn standard_normal(n: usize, dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n * dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rand_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_vec(n, c, h, w, standard_normal(1, n * c * h * w, rng))
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    // Direct nested-loop convolution, independent of im2col and gemm.
    fn conv_naive(x: &Tensor, conv: &Conv2d) -> Tensor {
        let win = conv.window;
        let ho = win.conv_out(x.h).unwrap();
        let wo = win.conv_out(x.w).unwrap();
        let k = win.kernel;
        let mut y = Tensor::zeros(x.n, conv.cout, ho, wo);
        for n in 0..x.n {
            for co in 0..conv.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[co]);
                        for ci in 0..x.c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * win.stride + ki) as isize - win.padding as isize;
                                    let ix = (ox * win.stride + kj) as isize - win.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize
                                    {
                                        continue;
                                    }
                                    let xv = x.data
                                        [((n * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    acc += xv * conv.weight[((co * x.c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        y.data[((n * conv.cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = seeded(1);
        let mut conv = Conv2d::new(3, 4, Window::new(4, 2, 1), true, &mut rng);
        conv.bias = Some(vec![0.1, -0.2, 0.3, 0.0]);
        let x = rand_tensor(2, 3, 9, 9, &mut rng);
        let (y, _) = conv.forward(&x);
        let expect = conv_naive(&x, &conv);
        assert_eq!((y.h, y.w), (4, 4));
        for (a, b) in y.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> for shared weights and no bias.
        let mut rng = seeded(2);
        let win = Window::new(4, 2, 1);
        let conv = Conv2d::new(3, 5, win, false, &mut rng);
        let deconv = ConvTranspose2d {
            cin: 5,
            cout: 3,
            window: win,
            weight: conv.weight.clone(),
            bias: None,
        };
        let x = rand_tensor(1, 3, 10, 10, &mut rng);
        let (cx, _) = conv.forward(&x);
        let y = rand_tensor(1, 5, cx.h, cx.w, &mut rng);
        let dy = deconv.forward(&y);
        assert_eq!((dy.h, dy.w), (10, 10));
        assert!((dot(&cx.data, &y.data) - dot(&x.data, &dy.data)).abs() < 1e-10);
    }

    fn check_grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64], idx: &[usize]) {
        for &i in idx {
            let h = 1e-6;
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "index {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = seeded(3);
        let conv = Conv2d::new(2, 3, Window::new(4, 2, 1), true, &mut rng);
        let x = rand_tensor(2, 2, 8, 8, &mut rng);
        let (y, cache) = conv.forward(&x);
        let probe = rand_tensor(y.n, y.c, y.h, y.w, &mut rng);
        let (dx, grads) = conv.backward(&cache, &probe, true);
        let loss_x = |xv: &[f64]| {
            let t = Tensor::from_vec(2, 2, 8, 8, xv.to_vec());
            dot(&conv.forward(&t).0.data, &probe.data)
        };
        check_grad(loss_x, &x.data, &dx.data, &[0, 17, 64, 100, 255]);
        let grads = grads.unwrap();
        let loss_w = |wv: &[f64]| {
            let mut c = conv.clone();
            c.weight = wv.to_vec();
            dot(&c.forward(&x).0.data, &probe.data)
        };
        check_grad(loss_w, &conv.weight, &grads[0], &[0, 5, 40, 95]);
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        let mut rng = seeded(4);
        let deconv = ConvTranspose2d::new(3, 2, Window::new(4, 2, 1), true, &mut rng);
        let x = rand_tensor(2, 3, 5, 5, &mut rng);
        let y = deconv.forward(&x);
        assert_eq!((y.h, y.w), (10, 10));
        let probe = rand_tensor(y.n, y.c, y.h, y.w, &mut rng);
        let (dx, grads) = deconv.backward(&x, &probe, true);
        let loss_x = |xv: &[f64]| {
            let t = Tensor::from_vec(2, 3, 5, 5, xv.to_vec());
            dot(&deconv.forward(&t).data, &probe.data)
        };
        check_grad(loss_x, &x.data, &dx.data, &[0, 13, 77, 149]);
        let grads = grads.unwrap();
        let loss_w = |wv: &[f64]| {
            let mut d = deconv.clone();
            d.weight = wv.to_vec();
            dot(&d.forward(&x).data, &probe.data)
        };
        check_grad(loss_w, &deconv.weight, &grads[0], &[0, 9, 50, 95]);
        let loss_b = |bv: &[f64]| {
            let mut d = deconv.clone();
            d.bias = Some(bv.to_vec());
            dot(&d.forward(&x).data, &probe.data)
        };
        check_grad(loss_b, deconv.bias.as_ref().unwrap(), &grads[1], &[0, 1]);
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = seeded(5);
        let bn = BatchNorm::new(3, &mut rng);
        let x = rand_tensor(4, 3, 2, 2, &mut rng);
        let probe = rand_tensor(4, 3, 2, 2, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let (_, cache) = bn.forward(&x, mode);
            let (dx, grads) = bn.backward(&cache, &probe, true);
            let loss_x = |xv: &[f64]| {
                let t = Tensor::from_vec(4, 3, 2, 2, xv.to_vec());
                dot(&bn.forward(&t, mode).0.data, &probe.data)
            };
            check_grad(loss_x, &x.data, &dx.data, &[0, 5, 22, 47]);
            let loss_g = |gv: &[f64]| {
                let mut b = bn.clone();
                b.gamma = gv.to_vec();
                dot(&b.forward(&x, mode).0.data, &probe.data)
            };
            check_grad(loss_g, &bn.gamma, &grads.unwrap()[0], &[0, 1, 2]);
        }
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let mut rng = seeded(6);
        let mut bn = BatchNorm::new(2, &mut rng);
        bn.gamma = vec![1.0, 1.0];
        let x = rand_tensor(8, 2, 3, 3, &mut rng);
        let (y, cache) = bn.forward(&x, Mode::Train);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|n| y.data[(n * 2 + ch) * 9..(n * 2 + ch + 1) * 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
        bn.absorb(&cache, 1.0);
        assert_eq!(bn.running_mean, cache.batch_mean);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = seeded(7);
        let lin = Linear::new(5, 3, true, &mut rng);
        let x = standard_normal(4, 5, &mut rng);
        let probe = standard_normal(4, 3, &mut rng);
        let (dx, grads) = lin.backward(&x, &probe, 4, true);
        check_grad(|xv| dot(&lin.forward(xv, 4), &probe), &x, &dx, &[0, 7, 19]);
        let grads = grads.unwrap();
        let loss_w = |wv: &[f64]| {
            let mut l = lin.clone();
            l.weight = wv.to_vec();
            dot(&l.forward(&x, 4), &probe)
        };
        check_grad(loss_w, &lin.weight, &grads[0], &[0, 4, 14]);
    }

    #[test]
    fn stable_logistic_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![vec![1.0, -1.0]];
        let mut opt = Adam::new(0.1, 0.5, 0.999, &[2]);
        opt.update(p.iter_mut().collect(), &[vec![1.0, -1.0]]);
        assert!((p[0][0] - 0.9).abs() < 1e-6);
        assert!((p[0][1] + 0.9).abs() < 1e-6);
    }
}
