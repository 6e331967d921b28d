//! Two-scale encoder-decoder producing bounded threshold maps.
//!
//! Stage widths are `2 - K - 2K - 4K - 2K - K`:
//!
//! ```text
//! x0 (2) -> enc1 (K) --------------------------------- cat -> dec1 (K) -> t * sigmoid
//!             \-> pool -> enc2 (2K) ------- cat -> dec2 (2K) -> up -/
//!                           \-> pool -> bottleneck (4K) -> up -/
//! ```
//!
//! Every convolution is 3x3 with periodic padding. Hidden layers use ReLU,
//! the last convolution is linear. Downsampling is 2x2 average pooling and
//! upsampling is nearest neighbour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation::{logit, sigmoid};
use crate::error::{invalid, mismatch, Result};
use crate::image::{ComplexImage, RealImage};
use crate::solvers::LambdaMaps;

pub const LAYER_NAMES: [&str; 5] = ["enc1", "enc2", "bottleneck", "dec2", "dec1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out x in x 3 x 3`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    fn weight(&self, o: usize, c: usize, a: usize, b: usize) -> f64 {
        self.weights[((o * self.in_channels + c) * 3 + a) * 3 + b]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnParams {
    filters: usize,
    bound: f64,
    layers: Vec<ConvLayer>,
}

/// `(in, out)` channel counts of each layer for `k` output maps.
pub fn layer_shapes(k: usize) -> [(usize, usize); 5] {
    [(2, k), (k, 2 * k), (2 * k, 4 * k), (4 * k + 2 * k, 2 * k), (2 * k + k, k)]
}

impl CnnParams {
    pub fn zeros(filters: usize, bound: f64) -> Result<Self> {
        let layers = layer_shapes(filters).iter().map(|&(i, o)| ConvLayer::zeros(i, o)).collect();
        Self::new(filters, bound, layers)
    }

    pub fn new(filters: usize, bound: f64, layers: Vec<ConvLayer>) -> Result<Self> {
        if filters == 0 {
            return Err(invalid("network needs at least one output channel"));
        }
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(invalid(format!("upper bound {bound} must be positive")));
        }
        let shapes = layer_shapes(filters);
        if layers.len() != shapes.len() {
            return Err(mismatch(format!("{} layers, expected {}", layers.len(), shapes.len())));
        }
        for (l, (&(i, o), name)) in layers.iter().zip(shapes.iter().zip(LAYER_NAMES)) {
            if l.in_channels != i || l.out_channels != o || l.weights.len() != i * o * 9 || l.bias.len() != o {
                return Err(mismatch(format!("layer {name} does not have shape {o}x{i}x3x3")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(crate::Error::NonFinite(format!("parameters of layer {name}")));
            }
        }
        Ok(Self { filters, bound, layers })
    }

    /// He-normal weights and zero biases. The last layer's weights are scaled
    /// by `last_gain` and its bias set so that a zero input to it maps to
    /// `init_lambda` (or `bound / 2` when `None`).
    pub fn init(filters: usize, bound: f64, seed: u64, last_gain: f64, init_lambda: Option<f64>) -> Result<Self> {
        let mut p = Self::zeros(filters, bound)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p.layers.len();
        for (idx, l) in p.layers.iter_mut().enumerate() {
            let std = (2.0 / (l.in_channels as f64 * 9.0)).sqrt() * if idx + 1 == n { last_gain } else { 1.0 };
            for w in &mut l.weights {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if let Some(lam) = init_lambda {
            if !(lam > 0.0 && lam < bound) {
                return Err(invalid(format!("initial lambda {lam} must lie in (0, {bound})")));
            }
            let b = logit(lam / bound);
            p.layers[n - 1].bias.iter_mut().for_each(|v| *v = b);
        }
        Ok(p)
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn with_bound(&self, bound: f64) -> Result<Self> {
        Self::new(self.filters, bound, self.layers.clone())
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Weights then bias of each layer in order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// `true` for entries of [`CnnParams::to_flat`] that are weights.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(std::iter::repeat_n(true, l.weights.len()));
            out.extend(std::iter::repeat_n(false, l.bias.len()));
        }
        out
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(mismatch(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut layers = self.layers.clone();
        let mut at = 0;
        for l in &mut layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Self::new(self.filters, self.bound, layers)
    }
}

/// `channels x h x w` activations.
#[derive(Debug, Clone)]
struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    fn cat(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Tensor { c: self.c + other.c, h: self.h, w: self.w, data }
    }

    fn split(&self, first: usize) -> (Tensor, Tensor) {
        let n = self.h * self.w;
        let a = Tensor { c: first, h: self.h, w: self.w, data: self.data[..first * n].to_vec() };
        let b = Tensor { c: self.c - first, h: self.h, w: self.w, data: self.data[first * n..].to_vec() };
        (a, b)
    }
}

/// Periodically padded copy, `(h + 2) x (w + 2)` per channel.
fn pad(x: &Tensor) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; x.c * ph * pw];
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for pi in 0..ph {
            let i = (pi + h - 1) % h;
            for pj in 0..pw {
                dst[pi * pw + pj] = src[i * w + (pj + w - 1) % w];
            }
        }
    }
    out
}

/// Folds gradients of a padded buffer back onto the periodic grid.
fn unpad(grad: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = &grad[ch * ph * pw..(ch + 1) * ph * pw];
        let dst = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for pi in 0..ph {
            let i = (pi + h - 1) % h;
            for pj in 0..pw {
                dst[i * w + (pj + w - 1) % w] += src[pi * pw + pj];
            }
        }
    }
    out
}

fn conv(layer: &ConvLayer, padded: &[f64], h: usize, w: usize) -> Tensor {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = Tensor::zeros(layer.out_channels, h, w);
    for o in 0..layer.out_channels {
        let dst = &mut out.data[o * h * w..(o + 1) * h * w];
        dst.iter_mut().for_each(|v| *v = layer.bias[o]);
        for c in 0..layer.in_channels {
            let src = &padded[c * ph * pw..(c + 1) * ph * pw];
            for a in 0..3 {
                for b in 0..3 {
                    let wv = layer.weight(o, c, a, b);
                    if wv == 0.0 {
                        continue;
                    }
                    for i in 0..h {
                        let row = &src[(i + a) * pw + b..(i + a) * pw + b + w];
                        for (d, s) in dst[i * w..(i + 1) * w].iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the padded-input gradient and accumulates parameter gradients.
fn conv_backward(layer: &ConvLayer, padded: &[f64], h: usize, w: usize, dout: &Tensor, grad: &mut ConvLayer) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut dpad = vec![0.0; layer.in_channels * ph * pw];
    for o in 0..layer.out_channels {
        let g = dout.plane(o);
        grad.bias[o] += g.iter().sum::<f64>();
        for c in 0..layer.in_channels {
            let src = &padded[c * ph * pw..(c + 1) * ph * pw];
            let dsrc = &mut dpad[c * ph * pw..(c + 1) * ph * pw];
            for a in 0..3 {
                for b in 0..3 {
                    let wv = layer.weight(o, c, a, b);
                    let mut acc = 0.0;
                    for i in 0..h {
                        let off = (i + a) * pw + b;
                        let gi = &g[i * w..(i + 1) * w];
                        for (s, gv) in src[off..off + w].iter().zip(gi) {
                            acc += s * gv;
                        }
                        for (d, gv) in dsrc[off..off + w].iter_mut().zip(gi) {
                            *d += wv * gv;
                        }
                    }
                    grad.weights[((o * layer.in_channels + c) * 3 + a) * 3 + b] += acc;
                }
            }
        }
    }
    dpad
}

fn relu(x: &Tensor) -> Tensor {
    Tensor { data: x.data.iter().map(|&v| v.max(0.0)).collect(), ..*x }
}

fn relu_backward(pre: &Tensor, g: &Tensor) -> Tensor {
    Tensor { data: pre.data.iter().zip(&g.data).map(|(&p, &d)| if p > 0.0 { d } else { 0.0 }).collect(), ..*g }
}

fn pool(x: &Tensor) -> Tensor {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        for i in 0..h {
            for j in 0..w {
                let s = src[2 * i * x.w + 2 * j]
                    + src[2 * i * x.w + 2 * j + 1]
                    + src[(2 * i + 1) * x.w + 2 * j]
                    + src[(2 * i + 1) * x.w + 2 * j + 1];
                out.data[(c * h + i) * w + j] = 0.25 * s;
            }
        }
    }
    out
}

fn pool_backward(g: &Tensor) -> Tensor {
    let (h, w) = (g.h * 2, g.w * 2);
    let mut out = Tensor::zeros(g.c, h, w);
    for c in 0..g.c {
        for i in 0..h {
            for j in 0..w {
                out.data[(c * h + i) * w + j] = 0.25 * g.data[(c * g.h + i / 2) * g.w + j / 2];
            }
        }
    }
    out
}

fn upsample(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for i in 0..h {
            for j in 0..w {
                out.data[(c * h + i) * w + j] = x.data[(c * x.h + i / 2) * x.w + j / 2];
            }
        }
    }
    out
}

fn upsample_backward(g: &Tensor) -> Tensor {
    let (h, w) = (g.h / 2, g.w / 2);
    let mut out = Tensor::zeros(g.c, h, w);
    for c in 0..g.c {
        for i in 0..g.h {
            for j in 0..g.w {
                out.data[(c * h + i / 2) * w + j / 2] += g.data[(c * g.h + i) * g.w + j];
            }
        }
    }
    out
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CnnCache {
    dims: (usize, usize),
    padded: Vec<Vec<f64>>,
    pre: Vec<Tensor>,
    e1: usize,
    e2: usize,
    logits: Tensor,
}

fn check_input(x0: &ComplexImage) -> Result<()> {
    let (h, w) = x0.dims();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(invalid(format!("network input {h}x{w} must be divisible by 4")));
    }
    Ok(())
}

/// Smallest value a generated map may take after rounding.
const MAP_FLOOR: f64 = f64::MIN_POSITIVE;

impl CnnParams {
    pub fn forward(&self, x0: &ComplexImage) -> Result<LambdaMaps> {
        self.forward_cached(x0).map(|(m, _)| m)
    }

    pub fn forward_cached(&self, x0: &ComplexImage) -> Result<(LambdaMaps, CnnCache)> {
        check_input(x0)?;
        let (h, w) = x0.dims();
        let k = self.filters;
        let mut input = Tensor::zeros(2, h, w);
        input.data[..h * w].copy_from_slice(x0.re());
        input.data[h * w..].copy_from_slice(x0.im());

        let l = &self.layers;
        let mut padded = Vec::with_capacity(5);
        let mut pre = Vec::with_capacity(4);

        padded.push(pad(&input));
        let z1 = conv(&l[0], &padded[0], h, w);
        let e1 = relu(&z1);
        pre.push(z1);

        let p1 = pool(&e1);
        padded.push(pad(&p1));
        let z2 = conv(&l[1], &padded[1], h / 2, w / 2);
        let e2 = relu(&z2);
        pre.push(z2);

        let p2 = pool(&e2);
        padded.push(pad(&p2));
        let z3 = conv(&l[2], &padded[2], h / 4, w / 4);
        let e3 = relu(&z3);
        pre.push(z3);

        let c2 = upsample(&e3).cat(&e2);
        padded.push(pad(&c2));
        let z4 = conv(&l[3], &padded[3], h / 2, w / 2);
        let d2 = relu(&z4);
        pre.push(z4);

        let c1 = upsample(&d2).cat(&e1);
        padded.push(pad(&c1));
        let logits = conv(&l[4], &padded[4], h, w);

        let t = self.bound;
        let maps = (0..k)
            .map(|c| {
                let vals = logits.plane(c).iter().map(|&u| (t * sigmoid(u)).max(MAP_FLOOR)).collect();
                RealImage::new(h, w, vals)
            })
            .collect::<Result<Vec<_>>>()?;
        let cache = CnnCache { dims: (h, w), padded, pre, e1: e1.c, e2: e2.c, logits };
        Ok((LambdaMaps::new(maps, t)?, cache))
    }

    /// Parameter gradients given the cotangent of every map entry.
    pub fn backward(&self, cache: &CnnCache, maps_bar: &[Vec<f64>]) -> Result<CnnParams> {
        let (h, w) = cache.dims;
        if maps_bar.len() != self.filters || maps_bar.iter().any(|m| m.len() != h * w) {
            return Err(mismatch("map cotangents do not match the network output"));
        }
        let t = self.bound;
        let l = &self.layers;
        let mut grads = CnnParams::zeros(self.filters, self.bound)?;

        let mut g = Tensor::zeros(self.filters, h, w);
        for (c, mb) in maps_bar.iter().enumerate() {
            for (n, &b) in mb.iter().enumerate() {
                let s = sigmoid(cache.logits.data[c * h * w + n]);
                g.data[c * h * w + n] = b * t * s * (1.0 - s);
            }
        }

        let dpad = conv_backward(&l[4], &cache.padded[4], h, w, &g, &mut grads.layers[4]);
        let dc1 = unpad(&dpad, l[4].in_channels, h, w);
        let (du1, mut de1) = dc1.split(dc1.c - cache.e1);
        let dd2 = relu_backward(&cache.pre[3], &upsample_backward(&du1));

        let dpad = conv_backward(&l[3], &cache.padded[3], h / 2, w / 2, &dd2, &mut grads.layers[3]);
        let dc2 = unpad(&dpad, l[3].in_channels, h / 2, w / 2);
        let (du2, mut de2) = dc2.split(dc2.c - cache.e2);
        let dz3 = relu_backward(&cache.pre[2], &upsample_backward(&du2));

        let dpad = conv_backward(&l[2], &cache.padded[2], h / 4, w / 4, &dz3, &mut grads.layers[2]);
        let dp2 = unpad(&dpad, l[2].in_channels, h / 4, w / 4);
        for (a, b) in de2.data.iter_mut().zip(pool_backward(&dp2).data) {
            *a += b;
        }
        let dz2 = relu_backward(&cache.pre[1], &de2);

        let dpad = conv_backward(&l[1], &cache.padded[1], h / 2, w / 2, &dz2, &mut grads.layers[1]);
        let dp1 = unpad(&dpad, l[1].in_channels, h / 2, w / 2);
        for (a, b) in de1.data.iter_mut().zip(pool_backward(&dp1).data) {
            *a += b;
        }
        let dz1 = relu_backward(&cache.pre[0], &de1);
        conv_backward(&l[0], &cache.padded[0], h, w, &dz1, &mut grads.layers[0]);
        Ok(grads)
    }
}

impl CnnCache {
    /// Smallest `|pre-activation|` over all ReLU inputs.
    pub fn relu_margin(&self) -> f64 {
        self.pre.iter().flat_map(|t| t.data.iter()).map(|v| v.abs()).fold(f64::INFINITY, f64::min)
    }

    /// Sign of every ReLU input.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre.iter().flat_map(|t| t.data.iter()).map(|&v| v > 0.0).collect()
    }
}

pub fn cnn_forward(x0: &ComplexImage, params: &CnnParams) -> Result<LambdaMaps> {
    params.forward(x0)
}
