//! Forward model `A = S F`, convolutional dictionary `D` and the composite
//! `B = A D`, together with their adjoints.
//!
//! All convolutions are circular. A kernel entry at index `(a, b)` acts at
//! spatial offset `(a - c, b - c)` with `c = k_f / 2`, so the kernel whose only
//! nonzero sits at `(c, c)` is the identity. Kernel spectra are computed once
//! when an operator is built.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::fft::{fft2, ifft2, transform};
use crate::image::ComplexImage;

/// Retained k-space coefficients, stored in FFT-native order (DC at `(0, 0)`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
}

impl SamplingMask {
    pub fn new(height: usize, width: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != height * width || height == 0 || width == 0 {
            return Err(mismatch(format!("mask of length {} for {height}x{width}", keep.len())));
        }
        if !keep.iter().any(|&k| k) {
            return Err(invalid("sampling mask retains no coefficient"));
        }
        Ok(Self { height, width, keep })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, keep: vec![true; height * width] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn retained(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_full(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(mismatch(format!("mask {:?} vs image {:?}", self.dims(), dims)));
        }
        Ok(())
    }

    /// Zeroes every entry outside the retained set.
    pub fn apply(&self, y: &ComplexImage) -> Result<ComplexImage> {
        self.check(y.dims())?;
        let mut out = y.clone();
        let (re, im) = out.planes_mut();
        for (n, &k) in self.keep.iter().enumerate() {
            if !k {
                re[n] = 0.0;
                im[n] = 0.0;
            }
        }
        Ok(out)
    }

    fn apply_spectrum(&self, buf: &mut [Complex64]) {
        for (z, &k) in buf.iter_mut().zip(&self.keep) {
            if !k {
                *z = Complex64::new(0.0, 0.0);
            }
        }
    }
}

pub const UNIT_NORM_TOL: f64 = 1e-10;

/// `K` real, odd-sized, unit-norm kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    kernel_size: usize,
    filters: Vec<Vec<f64>>,
}

impl FilterBank {
    pub fn new(kernel_size: usize, filters: Vec<Vec<f64>>) -> Result<Self> {
        let bank = Self { kernel_size, filters };
        bank.validate()?;
        Ok(bank)
    }

    /// Unvalidated bank for intermediate, not necessarily unit-norm, taps.
    pub(crate) fn from_parts(kernel_size: usize, filters: Vec<Vec<f64>>) -> Self {
        Self { kernel_size, filters }
    }

    /// Builds a bank after scaling each filter to unit norm.
    pub fn normalized(kernel_size: usize, mut filters: Vec<Vec<f64>>) -> Result<Self> {
        for f in &mut filters {
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(invalid("cannot normalize a zero or non-finite filter"));
            }
            f.iter_mut().for_each(|v| *v /= n);
        }
        Self::new(kernel_size, filters)
    }

    /// `count` copies of the centered delta kernel.
    pub fn delta(count: usize, kernel_size: usize) -> Result<Self> {
        let c = kernel_size / 2;
        let mut f = vec![0.0; kernel_size * kernel_size];
        if let Some(v) = f.get_mut(c * kernel_size + c) {
            *v = 1.0;
        }
        Self::new(kernel_size, vec![f; count])
    }

    /// Seeded i.i.d. Gaussian kernels projected to the unit sphere.
    pub fn random(count: usize, kernel_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = (0..count)
            .map(|_| (0..kernel_size * kernel_size).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Self::normalized(kernel_size, filters)
    }

    pub fn validate(&self) -> Result<()> {
        let kf = self.kernel_size;
        if kf == 0 || kf % 2 == 0 {
            return Err(invalid(format!("kernel size {kf} must be odd")));
        }
        if self.filters.is_empty() {
            return Err(invalid("filter bank is empty"));
        }
        for (k, f) in self.filters.iter().enumerate() {
            if f.len() != kf * kf {
                return Err(mismatch(format!("filter {k} has {} taps, expected {}", f.len(), kf * kf)));
            }
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(invalid(format!("filter {k} has norm {n}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        &self.filters[k]
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    /// Flattened `K x k_f x k_f` row-major taps.
    pub fn to_flat(&self) -> Vec<f64> {
        self.filters.iter().flatten().copied().collect()
    }

    pub fn from_flat(count: usize, kernel_size: usize, taps: &[f64]) -> Result<Self> {
        let n = kernel_size * kernel_size;
        if taps.len() != count * n {
            return Err(mismatch(format!("{} taps for {count} filters of size {kernel_size}", taps.len())));
        }
        Self::new(kernel_size, taps.chunks(n).map(<[f64]>::to_vec).collect())
    }

    /// Unnormalized DFT of each kernel zero-padded to `h x w` at the
    /// centered offset convention.
    pub(crate) fn spectra(&self, h: usize, w: usize) -> Result<Vec<Vec<Complex64>>> {
        let kf = self.kernel_size;
        if kf > h || kf > w {
            return Err(invalid(format!("kernel size {kf} exceeds image {h}x{w}")));
        }
        let root_n = ((h * w) as f64).sqrt();
        Ok(self
            .filters
            .iter()
            .map(|f| {
                let mut pad = vec![Complex64::new(0.0, 0.0); h * w];
                embed_kernel(f, kf, h, w, |n, v| pad[n] += v);
                transform(&mut pad, h, w, false);
                pad.iter().map(|z| z * root_n).collect()
            })
            .collect())
    }
}

/// Calls `put(flat_index, tap)` for each tap at its periodic offset.
pub(crate) fn embed_kernel(f: &[f64], kf: usize, h: usize, w: usize, mut put: impl FnMut(usize, f64)) {
    let c = kf / 2;
    for a in 0..kf {
        let i = (a + h - c) % h;
        for b in 0..kf {
            let j = (b + w - c) % w;
            put(i * w + j, f[a * kf + b]);
        }
    }
}

/// Stack `[s_1, ..., s_K]` of complex code maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMaps {
    maps: Vec<ComplexImage>,
}

impl FeatureMaps {
    pub fn new(maps: Vec<ComplexImage>) -> Result<Self> {
        let first = maps.first().ok_or_else(|| invalid("feature maps need at least one channel"))?;
        if maps.iter().any(|m| m.dims() != first.dims()) {
            return Err(mismatch("feature maps have non-uniform dimensions"));
        }
        Ok(Self { maps })
    }

    pub fn zeros(count: usize, height: usize, width: usize) -> Self {
        assert!(count > 0);
        Self { maps: vec![ComplexImage::zeros(height, width); count] }
    }

    pub fn random(count: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = (0..count)
            .map(|_| {
                ComplexImage::from_fn(height, width, |_, _| {
                    Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
                })
            })
            .collect();
        Self { maps }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.maps[0].dims()
    }

    pub fn maps(&self) -> &[ComplexImage] {
        &self.maps
    }

    pub fn map(&self, k: usize) -> &ComplexImage {
        &self.maps[k]
    }

    pub fn map_mut(&mut self, k: usize) -> &mut ComplexImage {
        &mut self.maps[k]
    }

    pub fn into_maps(self) -> Vec<ComplexImage> {
        self.maps
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() || self.dims() != other.dims() {
            return Err(mismatch(format!(
                "feature maps {}x{:?} vs {}x{:?}",
                self.len(),
                self.dims(),
                other.len(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.maps.iter().map(ComplexImage::norm_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn real_dot(&self, other: &Self) -> f64 {
        self.maps.iter().zip(&other.maps).map(|(a, b)| a.real_dot(b)).sum()
    }

    /// Sesquilinear inner product summed over channels.
    pub fn inner(&self, other: &Self) -> Result<Complex64> {
        self.same_shape(other)?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, b) in self.maps.iter().zip(&other.maps) {
            acc += crate::image::inner(a, b)?;
        }
        Ok(acc)
    }

    pub fn axpy(&mut self, a: f64, x: &Self) {
        for (m, v) in self.maps.iter_mut().zip(&x.maps) {
            m.axpy(a, v);
        }
    }

    pub fn add_scaled(&self, a: f64, x: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(a, x);
        out
    }

    pub fn scale(&self, a: f64) -> Self {
        Self { maps: self.maps.iter().map(|m| m.scale(a)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.maps.iter().all(ComplexImage::is_finite)
    }

    /// Largest modulus over all channels.
    pub fn max_abs(&self) -> f64 {
        self.maps.iter().map(ComplexImage::max_abs).fold(0.0, f64::max)
    }
}

pub fn forward_a(x: &ComplexImage, m: &SamplingMask) -> Result<ComplexImage> {
    m.check(x.dims())?;
    m.apply(&fft2(x))
}

/// Zero-filled adjoint reconstruction `F^H S y`.
pub fn adjoint_a(y: &ComplexImage, m: &SamplingMask) -> Result<ComplexImage> {
    Ok(ifft2(&m.apply(y)?))
}

/// Circular convolutional synthesis operator with cached kernel spectra.
#[derive(Debug, Clone)]
pub struct Dictionary {
    bank: FilterBank,
    height: usize,
    width: usize,
    spectra: Vec<Vec<Complex64>>,
}

impl Dictionary {
    pub fn new(bank: &FilterBank, height: usize, width: usize) -> Result<Self> {
        let spectra = bank.spectra(height, width)?;
        Ok(Self { bank: bank.clone(), height, width, spectra })
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn check_codes(&self, s: &FeatureMaps) -> Result<()> {
        if s.len() != self.len() {
            return Err(mismatch(format!("{} code maps for {} filters", s.len(), self.len())));
        }
        if s.dims() != self.dims() {
            return Err(mismatch(format!("codes {:?} vs operator {:?}", s.dims(), self.dims())));
        }
        Ok(())
    }

    fn check_image(&self, x: &ComplexImage) -> Result<()> {
        if x.dims() != self.dims() {
            return Err(mismatch(format!("image {:?} vs operator {:?}", x.dims(), self.dims())));
        }
        Ok(())
    }

    /// Unitary spectrum of `D s`.
    pub(crate) fn synth_spectrum(&self, s: &FeatureMaps) -> Vec<Complex64> {
        let (h, w) = self.dims();
        let mut acc = vec![Complex64::new(0.0, 0.0); h * w];
        for (map, spec) in s.maps().iter().zip(&self.spectra) {
            let mut buf = map.to_complex_vec();
            transform(&mut buf, h, w, false);
            for ((a, b), d) in acc.iter_mut().zip(&buf).zip(spec) {
                *a += d * b;
            }
        }
        acc
    }

    /// `D^H F^H` applied to a unitary spectrum.
    pub(crate) fn analysis_from_spectrum(&self, spectrum: &[Complex64]) -> FeatureMaps {
        let (h, w) = self.dims();
        let maps = self
            .spectra
            .iter()
            .map(|spec| {
                let mut buf: Vec<Complex64> = spectrum.iter().zip(spec).map(|(y, d)| d.conj() * y).collect();
                transform(&mut buf, h, w, true);
                ComplexImage::from_complex(h, w, &buf)
            })
            .collect();
        FeatureMaps { maps }
    }

    pub fn apply(&self, s: &FeatureMaps) -> Result<ComplexImage> {
        self.check_codes(s)?;
        let (h, w) = self.dims();
        let mut acc = self.synth_spectrum(s);
        transform(&mut acc, h, w, true);
        Ok(ComplexImage::from_complex(h, w, &acc))
    }

    pub fn adjoint(&self, x: &ComplexImage) -> Result<FeatureMaps> {
        self.check_image(x)?;
        let (h, w) = self.dims();
        let mut buf = x.to_complex_vec();
        transform(&mut buf, h, w, false);
        Ok(self.analysis_from_spectrum(&buf))
    }
}

pub fn dict_apply(s: &FeatureMaps, d: &FilterBank) -> Result<ComplexImage> {
    let (h, w) = s.dims();
    Dictionary::new(d, h, w)?.apply(s)
}

pub fn dict_adjoint(x: &ComplexImage, d: &FilterBank) -> Result<FeatureMaps> {
    Dictionary::new(d, x.height(), x.width())?.adjoint(x)
}

/// `B = S F D` and its adjoint.
#[derive(Debug, Clone)]
pub struct SynthesisOperator {
    dict: Dictionary,
    mask: SamplingMask,
}

impl SynthesisOperator {
    pub fn new(bank: &FilterBank, mask: &SamplingMask) -> Result<Self> {
        let (h, w) = mask.dims();
        Ok(Self { dict: Dictionary::new(bank, h, w)?, mask: mask.clone() })
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dict
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dict.dims()
    }

    pub fn filters(&self) -> usize {
        self.dict.len()
    }

    pub fn forward(&self, s: &FeatureMaps) -> Result<ComplexImage> {
        self.dict.check_codes(s)?;
        let (h, w) = self.dims();
        let mut spec = self.dict.synth_spectrum(s);
        self.mask.apply_spectrum(&mut spec);
        Ok(ComplexImage::from_complex(h, w, &spec))
    }

    pub fn adjoint(&self, y: &ComplexImage) -> Result<FeatureMaps> {
        self.dict.check_image(y)?;
        let mut spec = y.to_complex_vec();
        self.mask.apply_spectrum(&mut spec);
        Ok(self.dict.analysis_from_spectrum(&spec))
    }

    /// `B^H B s`.
    pub fn normal(&self, s: &FeatureMaps) -> Result<FeatureMaps> {
        self.dict.check_codes(s)?;
        let mut spec = self.dict.synth_spectrum(s);
        self.mask.apply_spectrum(&mut spec);
        Ok(self.dict.analysis_from_spectrum(&spec))
    }

    /// `B^H (B s - y)`.
    pub fn residual_gradient(&self, s: &FeatureMaps, y: &ComplexImage) -> Result<FeatureMaps> {
        self.dict.check_codes(s)?;
        self.dict.check_image(y)?;
        let mut spec = self.dict.synth_spectrum(s);
        for ((z, &k), n) in spec.iter_mut().zip(self.mask.keep()).zip(0..) {
            *z = if k { *z - y.at(n) } else { Complex64::new(0.0, 0.0) };
        }
        Ok(self.dict.analysis_from_spectrum(&spec))
    }
}

pub fn forward_b(s: &FeatureMaps, d: &FilterBank, m: &SamplingMask) -> Result<ComplexImage> {
    SynthesisOperator::new(d, m)?.forward(s)
}

pub fn adjoint_b(y: &ComplexImage, d: &FilterBank, m: &SamplingMask) -> Result<FeatureMaps> {
    SynthesisOperator::new(d, m)?.adjoint(y)
}

pub const POWER_ITERS: usize = 100;
pub const POWER_TOL: f64 = 1e-7;
const POWER_SEED: u64 = 0x5eed_b0b5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEstimate {
    /// Final Rayleigh quotient, an estimate of `||B||^2`.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl SynthesisOperator {
    /// Power iteration on `B^H B` from a fixed-seed start.
    pub fn norm_sq(&self, iters: usize, tol: f64) -> Result<NormEstimate> {
        power_iteration(self.filters(), self.dims(), iters, tol, |v| self.normal(v))
    }
}

pub(crate) fn power_iteration(
    count: usize,
    (h, w): (usize, usize),
    iters: usize,
    tol: f64,
    mut apply: impl FnMut(&FeatureMaps) -> Result<FeatureMaps>,
) -> Result<NormEstimate> {
    if iters == 0 {
        return Err(invalid("power iteration needs at least one iteration"));
    }
    let mut v = FeatureMaps::random(count, h, w, POWER_SEED);
    v = v.scale(1.0 / v.norm());
    let mut rho = f64::NAN;
    for it in 1..=iters {
        let u = apply(&v)?;
        let next = v.real_dot(&u);
        let un = u.norm();
        if !next.is_finite() || !un.is_finite() {
            return Err(crate::Error::NonFinite("power iteration".into()));
        }
        let done = (next - rho).abs() <= tol * next.abs();
        rho = next;
        if done || un == 0.0 {
            return Ok(NormEstimate { value: rho, converged: true, iterations: it });
        }
        v = u.scale(1.0 / un);
    }
    Ok(NormEstimate { value: rho, converged: false, iterations: iters })
}

pub fn op_norm_sq(
    d: &FilterBank,
    m: &SamplingMask,
    dims: (usize, usize),
    iters: usize,
    tol: f64,
) -> Result<NormEstimate> {
    if m.dims() != dims {
        return Err(mismatch(format!("mask {:?} vs dims {:?}", m.dims(), dims)));
    }
    SynthesisOperator::new(d, m)?.norm_sq(iters, tol)
}
