use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::{gemm, MatRef};
use super::{Param, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Forward mode of the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics for normalization; running statistics updated.
    Train,
    /// Batch statistics for normalization; running statistics left untouched.
    BatchStats,
    /// Running statistics for normalization.
    Eval,
}

impl Mode {
    fn uses_batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::BatchStats)
    }
}

/// Which gradients a backward pass produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradFlags {
    /// Accumulate into parameter gradient buffers.
    pub params: bool,
    /// Produce the gradient with respect to the layer input.
    pub input: bool,
}

impl GradFlags {
    pub const ALL: GradFlags = GradFlags { params: true, input: true };
    pub const INPUT_ONLY: GradFlags = GradFlags { params: false, input: true };
}

fn missing_cache(layer: &str) -> Error {
    Error::InvalidInput(format!("{layer}: backward called without a cached forward"))
}

fn he_normal<T: Real, R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Vec<T>,
    input_shape: [usize; 4],
    out_h: usize,
    out_w: usize,
}

/// 2-d convolution with square kernel, zero padding and bias.
///
/// Weight layout is `[out][in][ky][kx]`, i.e. an `out x (in * k * k)` matrix
/// multiplied against the im2col expansion of the input.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<ConvCache<T>>,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            he_normal(out_channels * fan_in, fan_in, rng),
        );
        let bias = Param::filled(format!("{name}.bias"), vec![out_channels], T::zero());
        Self { in_channels, out_channels, kernel, stride, padding, weight, bias, cache: None }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(shape_err(format!("input {h}x{w} smaller than kernel {k}")));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (n, h, w) = (x.batch, x.height, x.width);
        let ncol = n * oh * ow;
        let mut cols = vec![T::zero(); self.in_channels * k * k * ncol];
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for b in 0..n {
                        let src_base = (c * n + b) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = src_base + iy as usize * w;
                            let dst_row = (b * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[dst_row + ox] = x.data[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], shape: [usize; 4], oh: usize, ow: usize) -> Tensor<T> {
        let [c_in, n, h, w] = shape;
        if self.is_pointwise() {
            return Tensor { channels: c_in, batch: n, height: h, width: w, data: dcols.to_vec() };
        }
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let ncol = n * oh * ow;
        let mut dx = Tensor::zeros(c_in, n, h, w);
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &dcols[row * ncol..(row + 1) * ncol];
                    for b in 0..n {
                        let dst_base = (c * n + b) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = dst_base + iy as usize * w;
                            let src_row = (b * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dx.data[dst_row + ix as usize] += src[src_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Tensor<T>, keep_cache: bool) -> Result<Tensor<T>> {
        if x.channels != self.in_channels {
            return Err(shape_err(format!(
                "{}: expected {} input channels, got {}",
                self.weight.name, self.in_channels, x.channels
            )));
        }
        let (oh, ow) = self.output_size(x.height, x.width)?;
        let cols = self.im2col(x, oh, ow);
        let ncol = x.batch * oh * ow;
        let rows = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros(self.out_channels, x.batch, oh, ow);
        gemm(
            MatRef::new(&self.weight.value, self.out_channels, rows),
            MatRef::new(&cols, rows, ncol),
            &mut out.data,
            false,
        );
        for (co, chunk) in out.data.chunks_mut(ncol.max(1)).enumerate().take(self.out_channels) {
            let b = self.bias.value[co];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.cache = if keep_cache {
            Some(ConvCache { cols, input_shape: x.shape(), out_h: oh, out_w: ow })
        } else {
            None
        };
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, flags: GradFlags) -> Result<Option<Tensor<T>>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.weight.name))?;
        let [_, n, _, _] = cache.input_shape;
        if dy.shape() != [self.out_channels, n, cache.out_h, cache.out_w] {
            return Err(shape_err(format!("{}: gradient shape {:?}", self.weight.name, dy.shape())));
        }
        let ncol = n * cache.out_h * cache.out_w;
        let rows = self.in_channels * self.kernel * self.kernel;
        if flags.params {
            gemm(
                MatRef::new(&dy.data, self.out_channels, ncol),
                MatRef::new(&cache.cols, rows, ncol).t(),
                &mut self.weight.grad,
                true,
            );
            for co in 0..self.out_channels {
                let s: T = dy.data[co * ncol..(co + 1) * ncol].iter().copied().sum();
                self.bias.grad[co] += s;
            }
        }
        if !flags.input {
            return Ok(None);
        }
        let mut dcols = vec![T::zero(); rows * ncol];
        gemm(
            MatRef::new(&self.weight.value, self.out_channels, rows).t(),
            MatRef::new(&dy.data, self.out_channels, ncol),
            &mut dcols,
            false,
        );
        Ok(Some(self.col2im(&dcols, cache.input_shape, cache.out_h, cache.out_w)))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            cache: None,
        }
    }
}

/// Exact per-channel mean/variance accumulator (Chan et al. merge in f64).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelStats {
    pub count: Vec<u64>,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ChannelStats {
    pub fn new(channels: usize) -> Self {
        Self { count: vec![0; channels], mean: vec![0.0; channels], m2: vec![0.0; channels] }
    }

    pub fn observe<T: Real>(&mut self, x: &Tensor<T>) {
        for c in 0..x.channels {
            let vals = x.channel(c);
            let nb = vals.len() as u64;
            if nb == 0 {
                continue;
            }
            let mb = vals.iter().map(|v| v.as_f64()).sum::<f64>() / nb as f64;
            let m2b: f64 = vals.iter().map(|v| (v.as_f64() - mb).powi(2)).sum();
            let na = self.count[c];
            let n = na + nb;
            let delta = mb - self.mean[c];
            self.mean[c] += delta * nb as f64 / n as f64;
            self.m2[c] += m2b + delta * delta * (na as f64) * (nb as f64) / n as f64;
            self.count[c] = n;
        }
    }

    /// Population (biased) variance per channel.
    pub fn variance(&self) -> Vec<f64> {
        self.m2
            .iter()
            .zip(&self.count)
            .map(|(m2, &n)| if n == 0 { 0.0 } else { m2 / n as f64 })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Running statistics and affine parameters of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Batch normalization over the (n, h, w) axes of each channel.
///
/// Running statistics track the biased batch variance
/// `1/m * sum (z - mu)^2`, and are updated as
/// `running = (1 - momentum) * running + momentum * batch`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    /// When set, every forward also feeds the layer input into these exact
    /// statistics.
    pub collector: Option<ChannelStats>,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            channels,
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], T::one()),
            beta: Param::filled(format!("{name}.beta"), vec![channels], T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
            momentum,
            collector: None,
            cache: None,
        }
    }

    pub fn reset_running_stats(&mut self) {
        self.running_mean.iter_mut().for_each(|v| *v = T::zero());
        self.running_var.iter_mut().for_each(|v| *v = T::one());
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, keep_cache: bool) -> Result<Tensor<T>> {
        if x.channels != self.channels {
            return Err(shape_err(format!(
                "{}: expected {} channels, got {}",
                self.gamma.name, self.channels, x.channels
            )));
        }
        if let Some(stats) = self.collector.as_mut() {
            stats.observe(x);
        }
        let plane = x.plane();
        if plane == 0 {
            return Err(shape_err(format!("{}: empty batch", self.gamma.name)));
        }
        let eps = T::lit(self.eps);
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_stds = Vec::with_capacity(self.channels);
        let m = T::lit(self.momentum);
        for c in 0..self.channels {
            let vals = x.channel(c);
            let (mean, var) = if mode.uses_batch_stats() {
                let inv_n = T::one() / T::lit(plane as f64);
                let mean = vals.iter().copied().sum::<T>() * inv_n;
                let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                if mode == Mode::Train {
                    self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * mean;
                    self.running_var[c] = (T::one() - m) * self.running_var[c] + m * var;
                }
                (mean, var)
            } else {
                (self.running_mean[c], self.running_var[c])
            };
            let inv_std = T::one() / (var + eps).sqrt();
            inv_stds.push(inv_std);
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let range = c * plane..(c + 1) * plane;
            for ((xh, o), &v) in xhat.data[range.clone()]
                .iter_mut()
                .zip(&mut out.data[range.clone()])
                .zip(&x.data[range])
            {
                *xh = (v - mean) * inv_std;
                *o = g * *xh + b;
            }
        }
        self.cache = if keep_cache {
            Some(BnCache { xhat, inv_std: inv_stds, batch_stats: mode.uses_batch_stats() })
        } else {
            None
        };
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, flags: GradFlags) -> Result<Option<Tensor<T>>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.gamma.name))?;
        if !dy.same_shape(&cache.xhat) {
            return Err(shape_err(format!("{}: gradient shape {:?}", self.gamma.name, dy.shape())));
        }
        let plane = dy.plane();
        let mut dx = if flags.input { Some(dy.clone()) } else { None };
        for c in 0..self.channels {
            let range = c * plane..(c + 1) * plane;
            let dyc = &dy.data[range.clone()];
            let xh = &cache.xhat.data[range.clone()];
            let sum_dy: T = dyc.iter().copied().sum();
            let sum_dy_xh: T = dyc.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            if flags.params {
                self.gamma.grad[c] += sum_dy_xh;
                self.beta.grad[c] += sum_dy;
            }
            if let Some(dx) = dx.as_mut() {
                let g = self.gamma.value[c];
                let inv_std = cache.inv_std[c];
                let dxc = &mut dx.data[range];
                if cache.batch_stats {
                    let inv_n = T::one() / T::lit(plane as f64);
                    let mean_dy = sum_dy * inv_n;
                    let mean_dy_xh = sum_dy_xh * inv_n;
                    for ((d, &a), &h) in dxc.iter_mut().zip(dyc).zip(xh) {
                        *d = g * inv_std * (a - mean_dy - h * mean_dy_xh);
                    }
                } else {
                    for (d, &a) in dxc.iter_mut().zip(dyc) {
                        *d = g * inv_std * a;
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn state(&self) -> BnState {
        BnState {
            running_mean: self.running_mean.iter().map(|v| v.as_f64()).collect(),
            running_var: self.running_var.iter().map(|v| v.as_f64()).collect(),
            gamma: self.gamma.value.iter().map(|v| v.as_f64()).collect(),
            beta: self.beta.value.iter().map(|v| v.as_f64()).collect(),
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    pub fn set_running_stats(&mut self, mean: &[f64], var: &[f64]) -> Result<()> {
        if mean.len() != self.channels || var.len() != self.channels {
            return Err(shape_err(format!("{}: running stat length", self.gamma.name)));
        }
        self.running_mean = mean.iter().map(|&v| T::lit(v)).collect();
        self.running_var = var.iter().map(|&v| T::lit(v)).collect();
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Real>(&self) -> BatchNorm2d<U> {
        BatchNorm2d {
            channels: self.channels,
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::lit(v.as_f64())).collect(),
            eps: self.eps,
            momentum: self.momentum,
            collector: None,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, keep_cache: bool) -> Tensor<T> {
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.mask = keep_cache.then(|| x.data.iter().map(|&v| v > T::zero()).collect());
        out
    }

    pub fn backward<T: Real>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.as_ref().ok_or_else(|| missing_cache("relu"))?;
        if mask.len() != dy.data.len() {
            return Err(shape_err("relu gradient size"));
        }
        let mut dx = dy.clone();
        for (d, &m) in dx.data.iter_mut().zip(mask) {
            if !m {
                *d = T::zero();
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2 {
    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, keep_cache: bool) -> Result<Tensor<T>> {
        let (oh, ow) = (x.height / 2, x.width / 2);
        if oh == 0 || ow == 0 {
            return Err(shape_err(format!("max-pool input {}x{} too small", x.height, x.width)));
        }
        let mut out = Tensor::zeros(x.channels, x.batch, oh, ow);
        let mut arg = Vec::with_capacity(out.data.len());
        for c in 0..x.channels {
            for n in 0..x.batch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = x.idx(c, n, 2 * oy, 2 * ox);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = x.idx(c, n, 2 * oy + dy, 2 * ox + dx);
                            if x.data[i] > x.data[best] {
                                best = i;
                            }
                        }
                        let o = out.idx(c, n, oy, ox);
                        out.data[o] = x.data[best];
                        arg.push(best);
                    }
                }
            }
        }
        self.argmax = keep_cache.then_some((arg, x.shape()));
        Ok(out)
    }

    pub fn backward<T: Real>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, shape) = self.argmax.as_ref().ok_or_else(|| missing_cache("max-pool"))?;
        if arg.len() != dy.data.len() {
            return Err(shape_err("max-pool gradient size"));
        }
        let [c, n, h, w] = *shape;
        let mut dx = Tensor::zeros(c, n, h, w);
        for (&i, &g) in arg.iter().zip(&dy.data) {
            dx.data[i] += g;
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.argmax = None;
    }
}

/// Averages each channel map to a single value: `c x n x h x w -> c x n x 1 x 1`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, keep_cache: bool) -> Tensor<T> {
        let s = x.spatial();
        let inv = T::one() / T::lit(s as f64);
        let data: Vec<T> = x.data.chunks(s).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        self.input_shape = keep_cache.then_some(x.shape());
        Tensor { channels: x.channels, batch: x.batch, height: 1, width: 1, data }
    }

    pub fn backward<T: Real>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, n, h, w] = self.input_shape.ok_or_else(|| missing_cache("global-avg-pool"))?;
        if dy.shape() != [c, n, 1, 1] {
            return Err(shape_err("global-avg-pool gradient shape"));
        }
        let inv = T::one() / T::lit((h * w) as f64);
        let mut dx = Tensor::zeros(c, n, h, w);
        for (chunk, &g) in dx.data.chunks_mut(h * w).zip(&dy.data) {
            chunk.iter_mut().for_each(|v| *v = g * inv);
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.input_shape = None;
    }
}

#[derive(Debug, Clone, Copy)]
struct Interp {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn interp_table(input: usize, output: usize) -> Vec<Interp> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = if lo + 1 < input { lo + 1 } else { lo };
            Interp { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Non-learnable bilinear resize (half-pixel centers, edge clamped).
#[derive(Debug, Clone)]
pub struct BilinearUpsample {
    pub out_height: usize,
    pub out_width: usize,
    input_shape: Option<[usize; 4]>,
}

impl BilinearUpsample {
    pub fn new(out_height: usize, out_width: usize) -> Self {
        Self { out_height, out_width, input_shape: None }
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, keep_cache: bool) -> Tensor<T> {
        let ys = interp_table(x.height, self.out_height);
        let xs = interp_table(x.width, self.out_width);
        let mut out = Tensor::zeros(x.channels, x.batch, self.out_height, self.out_width);
        let (h, w) = (x.height, x.width);
        let mut o = 0;
        for plane in x.data.chunks(h * w) {
            for yi in &ys {
                let fy = T::lit(yi.frac);
                for xi in &xs {
                    let fx = T::lit(xi.frac);
                    let a = plane[yi.lo * w + xi.lo];
                    let b = plane[yi.lo * w + xi.hi];
                    let c = plane[yi.hi * w + xi.lo];
                    let d = plane[yi.hi * w + xi.hi];
                    let top = a + (b - a) * fx;
                    let bot = c + (d - c) * fx;
                    out.data[o] = top + (bot - top) * fy;
                    o += 1;
                }
            }
        }
        self.input_shape = keep_cache.then_some(x.shape());
        out
    }

    pub fn backward<T: Real>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, n, h, w] = self.input_shape.ok_or_else(|| missing_cache("bilinear-upsample"))?;
        if dy.shape() != [c, n, self.out_height, self.out_width] {
            return Err(shape_err("bilinear-upsample gradient shape"));
        }
        let ys = interp_table(h, self.out_height);
        let xs = interp_table(w, self.out_width);
        let mut dx = Tensor::zeros(c, n, h, w);
        let mut o = 0;
        for plane in dx.data.chunks_mut(h * w) {
            for yi in &ys {
                let fy = T::lit(yi.frac);
                for xi in &xs {
                    let fx = T::lit(xi.frac);
                    let g = dy.data[o];
                    o += 1;
                    let top = g * (T::one() - fy);
                    let bot = g * fy;
                    plane[yi.lo * w + xi.lo] += top * (T::one() - fx);
                    plane[yi.lo * w + xi.hi] += top * fx;
                    plane[yi.hi * w + xi.lo] += bot * (T::one() - fx);
                    plane[yi.hi * w + xi.hi] += bot * fx;
                }
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.input_shape = None;
    }
}
