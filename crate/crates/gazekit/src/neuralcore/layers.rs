//! Layer implementations with analytic forward/backward passes.
//!
//! Layers are batched: conv2d takes `[N, C, H, W]`, conv1d `[N, C, T]`,
//! fully-connected `[N, D]`. `backward` accumulates into parameter
//! gradients, so a training step is `zero_grad -> forward -> backward ->
//! sgd_step`; calling backward several times before stepping sums
//! gradients (used when one backbone serves many frames).
//!
//! Rayon parallelism only ever splits work across disjoint output slices
//! with sequential reductions inside each slice, so results are bitwise
//! identical regardless of thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::{Param, Tensor};
use super::NeuralError;

/// Forward execution mode.
///
/// `Train` uses batch statistics and records state for backward.
/// `Eval` uses running statistics and records nothing. `FineTune` uses
/// running statistics (frozen normalization) but still records state so
/// gradients can flow through an already-trained stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    FineTune,
}

impl Mode {
    fn records(self) -> bool {
        self != Mode::Eval
    }
}

/// Serializable layer hyperparameters; enough to rebuild a layer skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize },
    Conv1d { in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize },
    BatchNorm { channels: usize, eps: f64, momentum: f64 },
    Relu,
    Fc { in_dim: usize, out_dim: usize },
    Gap,
}

impl LayerSpec {
    /// Builds the layer with seeded fan-in-scaled uniform initialization.
    pub fn build<R: Rng>(&self, rng: &mut R) -> Box<dyn Layer> {
        match *self {
            LayerSpec::Conv2d { in_c, out_c, k, stride, padding } => {
                Box::new(Conv2d::new(in_c, out_c, k, stride, padding, rng))
            }
            LayerSpec::Conv1d { in_c, out_c, k, stride, padding } => {
                Box::new(Conv1d::new(in_c, out_c, k, stride, padding, rng))
            }
            LayerSpec::BatchNorm { channels, eps, momentum } => {
                Box::new(BatchNorm::new(channels, eps, momentum))
            }
            LayerSpec::Relu => Box::new(Relu::default()),
            LayerSpec::Fc { in_dim, out_dim } => Box::new(Fc::new(in_dim, out_dim, rng)),
            LayerSpec::Gap => Box::new(Gap::default()),
        }
    }
}

pub trait Layer: Send {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NeuralError>;
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, NeuralError>;
    fn spec(&self) -> LayerSpec;
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
    /// Named tensors for checkpointing: parameters plus any buffers.
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        Vec::new()
    }
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        Vec::new()
    }
}

fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, limit, rng)
}

fn shape_err(expected: impl Into<String>, got: &[usize]) -> NeuralError {
    NeuralError::ShapeMismatch { expected: expected.into(), got: format!("{got:?}") }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Param,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * k * k;
        Self {
            in_c,
            out_c,
            k,
            stride,
            padding,
            weight: Param::new(he_uniform(&[out_c, in_c, k, k], fan_in, rng)),
            bias: Param::new(Tensor::zeros(&[out_c])),
            cached_input: None,
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.k) / self.stride + 1,
            (w + 2 * self.padding - self.k) / self.stride + 1,
        )
    }

    /// Output-column range `[ox_min, ox_max)` for which the input column
    /// `ox*stride + kx - padding` stays inside `[0, w)`.
    fn ox_range(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let s = self.stride as i64;
        let off = kx as i64 - self.padding as i64;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((w as i64 - 1 - off) / s + 1).clamp(0, ow as i64);
        (lo.min(hi) as usize, hi as usize)
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NeuralError> {
        let [n, c, h, w] = x.shape[..] else {
            return Err(shape_err("[N, C, H, W]", &x.shape));
        };
        if c != self.in_c {
            return Err(shape_err(format!("{} input channels", self.in_c), &x.shape));
        }
        let (oh, ow) = self.out_dims(h, w);
        let mut out = Tensor::zeros(&[n, self.out_c, oh, ow]);
        let in_plane = h * w;
        let out_plane = oh * ow;
        let weight = &self.weight.value.data;
        let bias = &self.bias.value.data;
        let xd = &x.data;
        let (k, s, p, in_c, out_c) = (self.k, self.stride, self.padding, self.in_c, self.out_c);
        let ranges: Vec<(usize, usize)> = (0..k).map(|kx| self.ox_range(kx, w, ow)).collect();
        out.data
            .par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(plane_idx, out_plane_data)| {
                let ni = plane_idx / out_c;
                let co = plane_idx % out_c;
                out_plane_data.iter_mut().for_each(|v| *v = bias[co]);
                for oy in 0..oh {
                    let out_row = &mut out_plane_data[oy * ow..(oy + 1) * ow];
                    for ky in 0..k {
                        let iy = (oy * s + ky) as i64 - p as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let iy = iy as usize;
                        for ci in 0..in_c {
                            let in_row = &xd[(ni * in_c + ci) * in_plane + iy * w..][..w];
                            let w_base = ((co * in_c + ci) * k + ky) * k;
                            for kx in 0..k {
                                let wv = weight[w_base + kx];
                                let (lo, hi) = ranges[kx];
                                let off = kx as i64 - p as i64;
                                for ox in lo..hi {
                                    let ix = (ox * s) as i64 + off;
                                    out_row[ox] += wv * in_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            });
        self.cached_input = if mode.records() { Some(x.clone()) } else { None };
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, NeuralError> {
        let x = self.cached_input.take().ok_or(NeuralError::NoForwardState)?;
        let [n, _, h, w] = x.shape[..] else { unreachable!() };
        let [gn, gc, oh, ow] = grad_out.shape[..] else {
            return Err(shape_err("[N, C', OH, OW]", &grad_out.shape));
        };
        if gn != n || gc != self.out_c {
            return Err(shape_err("grad matching forward output", &grad_out.shape));
        }
        let in_plane = h * w;
        let out_plane = oh * ow;
        let (k, s, p, in_c, out_c) = (self.k, self.stride, self.padding, self.in_c, self.out_c);
        let ranges: Vec<(usize, usize)> = (0..k).map(|kx| self.ox_range(kx, w, ow)).collect();
        let xd = &x.data;
        let gd = &grad_out.data;

        // Bias and weight gradients: one task per output channel.
        let wslice = in_c * k * k;
        let weight_grads = &mut self.weight.grad.data;
        let bias_grads = &mut self.bias.grad.data;
        weight_grads
            .par_chunks_mut(wslice)
            .zip(bias_grads.par_iter_mut())
            .enumerate()
            .for_each(|(co, (wg, bg))| {
                for ni in 0..n {
                    let g_plane = &gd[(ni * out_c + co) * out_plane..][..out_plane];
                    for oy in 0..oh {
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        for ky in 0..k {
                            let iy = (oy * s + ky) as i64 - p as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let iy = iy as usize;
                            for ci in 0..in_c {
                                let in_row = &xd[(ni * in_c + ci) * in_plane + iy * w..][..w];
                                for kx in 0..k {
                                    let (lo, hi) = ranges[kx];
                                    let off = kx as i64 - p as i64;
                                    let mut acc = 0.0;
                                    for ox in lo..hi {
                                        let ix = (ox * s) as i64 + off;
                                        acc += g_row[ox] * in_row[ix as usize];
                                    }
                                    wg[(ci * k + ky) * k + kx] += acc;
                                }
                            }
                        }
                    }
                    for oy in 0..oh {
                        for ox in 0..ow {
                            *bg += g_plane[oy * ow + ox];
                        }
                    }
                }
            });

        // Input gradient: one task per (sample, input channel) plane.
        let weight = &self.weight.value.data;
        let mut grad_in = Tensor::zeros(&x.shape);
        grad_in
            .data
            .par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(plane_idx, gi_plane)| {
                let ni = plane_idx / in_c;
                let ci = plane_idx % in_c;
                for co in 0..out_c {
                    let g_plane = &gd[(ni * out_c + co) * out_plane..][..out_plane];
                    for oy in 0..oh {
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        for ky in 0..k {
                            let iy = (oy * s + ky) as i64 - p as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let gi_row = &mut gi_plane[iy as usize * w..(iy as usize + 1) * w];
                            let w_base = ((co * in_c + ci) * k + ky) * k;
                            for kx in 0..k {
                                let wv = weight[w_base + kx];
                                let (lo, hi) = ranges[kx];
                                let off = kx as i64 - p as i64;
                                for ox in lo..hi {
                                    let ix = (ox * s) as i64 + off;
                                    gi_row[ix as usize] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            });
        Ok(grad_in)
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            in_c: self.in_c,
            out_c: self.out_c,
            k: self.k,
            stride: self.stride,
            padding: self.padding,
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight.value), ("bias", &self.bias.value)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight.value), ("bias", &mut self.bias.value)]
    }
}

// ---------------------------------------------------------------------------
// Conv1d
// ---------------------------------------------------------------------------

pub struct Conv1d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Param,
    cached_input: Option<Tensor>,
}

impl Conv1d {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * k;
        Self {
            in_c,
            out_c,
            k,
            stride,
            padding,
            weight: Param::new(he_uniform(&[out_c, in_c, k], fan_in, rng)),
            bias: Param::new(Tensor::zeros(&[out_c])),
            cached_input: None,
        }
    }

    pub fn out_len(&self, t: usize) -> usize {
        (t + 2 * self.padding - self.k) / self.stride + 1
    }
}

impl Layer for Conv1d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NeuralError> {
        let [n, c, t] = x.shape[..] else {
            return Err(shape_err("[N, C, T]", &x.shape));
        };
        if c != self.in_c {
            return Err(shape_err(format!("{} input channels", self.in_c), &x.shape));
        }
        let ot = self.out_len(t);
        let mut out = Tensor::zeros(&[n, self.out_c, ot]);
        let (k, s, p, in_c, out_c) = (self.k, self.stride, self.padding, self.in_c, self.out_c);
        let weight = &self.weight.value.data;
        let bias = &self.bias.value.data;
        let xd = &x.data;
        out.data.par_chunks_mut(ot).enumerate().for_each(|(row_idx, out_row)| {
            let ni = row_idx / out_c;
            let co = row_idx % out_c;
            out_row.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..in_c {
                let in_row = &xd[(ni * in_c + ci) * t..][..t];
                for kx in 0..k {
                    let wv = weight[(co * in_c + ci) * k + kx];
                    let off = kx as i64 - p as i64;
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s) as i64 + off;
                        if ix >= 0 && (ix as usize) < t {
                            *o += wv * in_row[ix as usize];
                        }
                    }
                }
            }
        });
        self.cached_input = if mode.records() { Some(x.clone()) } else { None };
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, NeuralError> {
        let x = self.cached_input.take().ok_or(NeuralError::NoForwardState)?;
        let [n, _, t] = x.shape[..] else { unreachable!() };
        let [gn, gc, ot] = grad_out.shape[..] else {
            return Err(shape_err("[N, C', OT]", &grad_out.shape));
        };
        if gn != n || gc != self.out_c {
            return Err(shape_err("grad matching forward output", &grad_out.shape));
        }
        let (k, s, p, in_c, out_c) = (self.k, self.stride, self.padding, self.in_c, self.out_c);
        let xd = &x.data;
        let gd = &grad_out.data;

        let wslice = in_c * k;
        self.weight
            .grad
            .data
            .par_chunks_mut(wslice)
            .zip(self.bias.grad.data.par_iter_mut())
            .enumerate()
            .for_each(|(co, (wg, bg))| {
                for ni in 0..n {
                    let g_row = &gd[(ni * out_c + co) * ot..][..ot];
                    for ci in 0..in_c {
                        let in_row = &xd[(ni * in_c + ci) * t..][..t];
                        for kx in 0..k {
                            let off = kx as i64 - p as i64;
                            let mut acc = 0.0;
                            for (ox, g) in g_row.iter().enumerate() {
                                let ix = (ox * s) as i64 + off;
                                if ix >= 0 && (ix as usize) < t {
                                    acc += g * in_row[ix as usize];
                                }
                            }
                            wg[ci * k + kx] += acc;
                        }
                    }
                    *bg += g_row.iter().sum::<f64>();
                }
            });

        let weight = &self.weight.value.data;
        let mut grad_in = Tensor::zeros(&x.shape);
        grad_in.data.par_chunks_mut(t).enumerate().for_each(|(row_idx, gi_row)| {
            let ni = row_idx / in_c;
            let ci = row_idx % in_c;
            for co in 0..out_c {
                let g_row = &gd[(ni * out_c + co) * ot..][..ot];
                for kx in 0..k {
                    let wv = weight[(co * in_c + ci) * k + kx];
                    let off = kx as i64 - p as i64;
                    for (ox, g) in g_row.iter().enumerate() {
                        let ix = (ox * s) as i64 + off;
                        if ix >= 0 && (ix as usize) < t {
                            gi_row[ix as usize] += wv * g;
                        }
                    }
                }
            }
        });
        Ok(grad_in)
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv1d {
            in_c: self.in_c,
            out_c: self.out_c,
            k: self.k,
            stride: self.stride,
            padding: self.padding,
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight.value), ("bias", &self.bias.value)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight.value), ("bias", &mut self.bias.value)]
    }
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

/// Normalizes per channel over batch and any trailing spatial dimensions.
/// Running statistics use biased variance; `Train` mode updates them,
/// `Eval`/`FineTune` read them.
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<BnCache>,
}

struct BnCache {
    shape: Vec<usize>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            channels,
            eps,
            momentum,
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            cache: None,
        }
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize), NeuralError> {
        if x.ndim() < 2 || x.shape[1] != self.channels {
            return Err(shape_err(format!("[N, {}, ...]", self.channels), &x.shape));
        }
        let n = x.shape[0];
        let spatial = x.numel() / (n * self.channels);
        Ok((n, spatial))
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NeuralError> {
        let (n, spatial) = self.dims(x)?;
        let c = self.channels;
        let m = (n * spatial) as f64;
        let mut out = Tensor::zeros(&x.shape);
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; c];

        for ch in 0..c {
            let (mean, var) = if mode == Mode::Train {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ch) * spatial;
                    for v in &x.data[base..base + spatial] {
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / m;
                let var = (sq / m - mean * mean).max(0.0);
                self.running_mean.data[ch] =
                    (1.0 - self.momentum) * self.running_mean.data[ch] + self.momentum * mean;
                self.running_var.data[ch] =
                    (1.0 - self.momentum) * self.running_var.data[ch] + self.momentum * var;
                (mean, var)
            } else {
                (self.running_mean.data[ch], self.running_var.data[ch])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.value.data[ch];
            let b = self.beta.value.data[ch];
            for ni in 0..n {
                let base = (ni * c + ch) * spatial;
                for i in base..base + spatial {
                    let xh = (x.data[i] - mean) * istd;
                    xhat[i] = xh;
                    out.data[i] = g * xh + b;
                }
            }
        }
        self.cache = if mode.records() {
            Some(BnCache {
                shape: x.shape.clone(),
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            })
        } else {
            None
        };
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, NeuralError> {
        let cache = self.cache.take().ok_or(NeuralError::NoForwardState)?;
        if grad_out.shape != cache.shape {
            return Err(shape_err("grad matching forward output", &grad_out.shape));
        }
        let c = self.channels;
        let n = cache.shape[0];
        let spatial = grad_out.numel() / (n * c);
        let m = (n * spatial) as f64;
        let mut grad_in = Tensor::zeros(&cache.shape);
        for ch in 0..c {
            let g = self.gamma.value.data[ch];
            let istd = cache.inv_std[ch];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for ni in 0..n {
                let base = (ni * c + ch) * spatial;
                for i in base..base + spatial {
                    sum_dy += grad_out.data[i];
                    sum_dy_xhat += grad_out.data[i] * cache.xhat[i];
                }
            }
            self.beta.grad.data[ch] += sum_dy;
            self.gamma.grad.data[ch] += sum_dy_xhat;
            if cache.batch_stats {
                let mean_dy = sum_dy / m;
                let mean_dy_xhat = sum_dy_xhat / m;
                for ni in 0..n {
                    let base = (ni * c + ch) * spatial;
                    for i in base..base + spatial {
                        grad_in.data[i] = g
                            * istd
                            * (grad_out.data[i] - mean_dy - cache.xhat[i] * mean_dy_xhat);
                    }
                }
            } else {
                // Frozen statistics: the map is affine in x.
                for ni in 0..n {
                    let base = (ni * c + ch) * spatial;
                    for i in base..base + spatial {
                        grad_in.data[i] = g * istd * grad_out.data[i];
                    }
                }
            }
        }
        Ok(grad_in)
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::BatchNorm { channels: self.channels, eps: self.eps, momentum: self.momentum }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("gamma", &self.gamma.value),
            ("beta", &self.beta.value),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("gamma", &mut self.gamma.value),
            ("beta", &mut self.beta.value),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }
}

// ---------------------------------------------------------------------------
// Relu, Fc, Gap
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct Relu {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NeuralError> {
        let mut out = x.clone();
        let mut mask = Vec::new();
        if mode.records() {
            mask = vec![false; x.numel()];
        }
        for (i, v) in out.data.iter_mut().enumerate() {
            if *v > 0.0 {
                if mode.records() {
                    mask[i] = true;
                }
            } else {
                *v = 0.0;
            }
        }
        self.mask = if mode.records() { Some((x.shape.clone(), mask)) } else { None };
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, NeuralError> {
        let (shape, mask) = self.mask.take().ok_or(NeuralError::NoForwardState)?;
        if grad_out.shape != shape {
            return Err(shape_err("grad matching forward output", &grad_out.shape));
        }
        let mut grad_in = grad_out.clone();
        for (g, &alive) in grad_in.data.iter_mut().zip(&mask) {
            if !alive {
                *g = 0.0;
            }
        }
        Ok(grad_in)
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Relu
    }
}

pub struct Fc {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param,
    pub bias: Param,
    cached_input: Option<Tensor>,
}

impl Fc {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: Param::new(he_uniform(&[out_dim, in_dim], in_dim, rng)),
            bias: Param::new(Tensor::zeros(&[out_dim])),
            cached_input: None,
        }
    }

    /// Zeroes the weights; used where an untrained head must start neutral.
    pub fn zero_init(&mut self) {
        self.weight.value.fill(0.0);
        self.bias.value.fill(0.0);
    }
}

impl Layer for Fc {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NeuralError> {
        let [n, d] = x.shape[..] else {
            return Err(shape_err("[N, D]", &x.shape));
        };
        if d != self.in_dim {
            return Err(shape_err(format!("[N, {}]", self.in_dim), &x.shape));
        }
        let mut out = Tensor::zeros(&[n, self.out_dim]);
        for ni in 0..n {
            let xin = &x.data[ni * d..(ni + 1) * d];
            for o in 0..self.out_dim {
                let wrow = &self.weight.value.data[o * d..(o + 1) * d];
                let mut acc = self.bias.value.data[o];
                for i in 0..d {
                    acc += wrow[i] * xin[i];
                }
                out.data[ni * self.out_dim + o] = acc;
            }
        }
        self.cached_input = if mode.records() { Some(x.clone()) } else { None };
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, NeuralError> {
        let x = self.cached_input.take().ok_or(NeuralError::NoForwardState)?;
        let [n, d] = x.shape[..] else { unreachable!() };
        if grad_out.shape != [n, self.out_dim] {
            return Err(shape_err("grad matching forward output", &grad_out.shape));
        }
        for ni in 0..n {
            let xin = &x.data[ni * d..(ni + 1) * d];
            let grow = &grad_out.data[ni * self.out_dim..(ni + 1) * self.out_dim];
            for o in 0..self.out_dim {
                let g = grow[o];
                self.bias.grad.data[o] += g;
                let wg = &mut self.weight.grad.data[o * d..(o + 1) * d];
                for i in 0..d {
                    wg[i] += g * xin[i];
                }
            }
        }
        let mut grad_in = Tensor::zeros(&x.shape);
        for ni in 0..n {
            let grow = &grad_out.data[ni * self.out_dim..(ni + 1) * self.out_dim];
            let gin = &mut grad_in.data[ni * d..(ni + 1) * d];
            for o in 0..self.out_dim {
                let g = grow[o];
                let wrow = &self.weight.value.data[o * d..(o + 1) * d];
                for i in 0..d {
                    gin[i] += wrow[i] * g;
                }
            }
        }
        Ok(grad_in)
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Fc { in_dim: self.in_dim, out_dim: self.out_dim }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight.value), ("bias", &self.bias.value)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight.value), ("bias", &mut self.bias.value)]
    }
}

/// Global average pool over all trailing spatial dimensions:
/// `[N, C, ...] -> [N, C]`.
#[derive(Default)]
pub struct Gap {
    cached_shape: Option<Vec<usize>>,
}

impl Layer for Gap {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NeuralError> {
        if x.ndim() < 3 {
            return Err(shape_err("[N, C, ...spatial]", &x.shape));
        }
        let n = x.shape[0];
        let c = x.shape[1];
        let spatial = x.numel() / (n * c);
        let mut out = Tensor::zeros(&[n, c]);
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * spatial;
                let sum: f64 = x.data[base..base + spatial].iter().sum();
                out.data[ni * c + ch] = sum / spatial as f64;
            }
        }
        self.cached_shape = if mode.records() { Some(x.shape.clone()) } else { None };
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, NeuralError> {
        let shape = self.cached_shape.take().ok_or(NeuralError::NoForwardState)?;
        let n = shape[0];
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();
        if grad_out.shape != [n, c] {
            return Err(shape_err("grad matching forward output", &grad_out.shape));
        }
        let mut grad_in = Tensor::zeros(&shape);
        for ni in 0..n {
            for ch in 0..c {
                let g = grad_out.data[ni * c + ch] / spatial as f64;
                let base = (ni * c + ch) * spatial;
                grad_in.data[base..base + spatial].iter_mut().for_each(|v| *v = g);
            }
        }
        Ok(grad_in)
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Gap
    }
}

// ---------------------------------------------------------------------------
// Sequential
// ---------------------------------------------------------------------------

/// Fixed feed-forward stack with a static tape: forward caches per-layer
/// state, backward walks the layers in reverse.
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn from_specs<R: Rng>(specs: &[LayerSpec], rng: &mut R) -> Self {
        Self { layers: specs.iter().map(|s| s.build(rng)).collect() }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NeuralError> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, NeuralError> {
        let mut cur = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Named tensors with `l{index}.` prefixes, for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tensors().into_iter().map(move |(name, t)| (format!("l{i}.{name}"), t))
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tensors_mut().into_iter().map(move |(name, t)| (format!("l{i}.{name}"), t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clamps_and_routes_gradient() {
        let mut relu = Relu::default();
        let x = Tensor::from_vec(&[1, 3], vec![-1.0, 0.0, 2.0]);
        let y = relu.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data, vec![0.0, 0.0, 2.0]);
        let g = relu.backward(&Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv1d::new(1, 1, 1, 1, 0, &mut rng);
        conv.weight.value.data[0] = 1.0;
        conv.bias.value.data[0] = 0.0;
        let x = Tensor::from_vec(&[1, 1, 4], vec![1.0, -2.0, 3.0, 0.5]);
        let y = conv.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv2d_ones_kernel_counts_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(1, 1, 3, 1, 0, &mut rng);
        conv.weight.value.fill(1.0);
        conv.bias.value.fill(0.0);
        let x = Tensor::full(&[1, 1, 5, 5], 1.0);
        let y = conv.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape, vec![1, 1, 3, 3]);
        for v in &y.data {
            assert_abs_diff_eq!(*v, 9.0);
        }
    }

    #[test]
    fn conv2d_stride_and_padding_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = Tensor::zeros(&[2, 2, 8, 8]);
        let y = conv.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape, vec![2, 3, 4, 4]);
    }

    #[test]
    fn fc_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fc = Fc::new(3, 2, &mut rng);
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]);
        fc.forward(&x, Mode::Train).unwrap();
        let g = fc.backward(&Tensor::from_vec(&[1, 2], vec![1.0, 0.0])).unwrap();
        // Input grad of output 0 is the first weight row.
        for i in 0..3 {
            assert_abs_diff_eq!(g.data[i], fc.weight.value.data[i]);
        }
    }

    #[test]
    fn batchnorm_eval_is_affine() {
        let mut bn = BatchNorm::new(2, 1e-5, 0.1);
        bn.running_mean.data = vec![1.0, -1.0];
        bn.running_var.data = vec![4.0, 1.0];
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 3.0, -1.0, 0.0]);
        let y = bn.forward(&x, Mode::Eval).unwrap();
        let istd0 = 1.0 / (4.0f64 + 1e-5).sqrt();
        assert_abs_diff_eq!(y.data[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data[1], 2.0 * istd0, epsilon = 1e-9);
        // Applying it twice to the same input gives the same answer.
        let y2 = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data, y2.data);
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut bn = BatchNorm::new(1, 1e-8, 0.1);
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        let var: f64 = y.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn backward_requires_forward() {
        let mut relu = Relu::default();
        let err = relu.backward(&Tensor::zeros(&[1])).unwrap_err();
        assert!(matches!(err, NeuralError::NoForwardState));
    }

    #[test]
    fn gap_averages_spatial() {
        let mut gap = Gap::default();
        let x = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 3.0, 10.0, 20.0]);
        let y = gap.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape, vec![1, 2]);
        assert_abs_diff_eq!(y.data[0], 2.0);
        assert_abs_diff_eq!(y.data[1], 15.0);
    }
}
