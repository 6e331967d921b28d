//! Synthetic acquisitions: ellipse phantoms, low-frequency masks and
//! complex Gaussian noise.
//!
//! Masks are stored in FFT-native order (DC at index `(0, 0)`). They are
//! built in the shifted, DC-centered layout and moved back with
//! [`ifftshift`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, mismatch, Result};
use crate::fft::ifftshift;
use crate::image::ComplexImage;
use crate::operators::{forward_a, SamplingMask};

/// Noise levels used for evaluation.
pub const SIGMAS: [f64; 3] = [0.075, 0.15, 0.3];

/// Peak magnitude of every phantom.
pub const PHANTOM_PEAK: f64 = 10.0;

pub const DEFAULT_KEEP_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    #[default]
    CenteredLowfreq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionSpec {
    pub sigma: f64,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    #[serde(default)]
    pub mask_kind: MaskKind,
    pub seed: u64,
}

fn default_keep() -> f64 {
    DEFAULT_KEEP_FRACTION
}

impl AcquisitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("noise level {} must be finite and >= 0", self.sigma)));
        }
        check_fraction(self.keep_fraction)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(invalid(format!("keep fraction {f} must lie in (0, 1]")));
    }
    Ok(())
}

/// Retains a centered `round(h sqrt f) x round(w sqrt f)` block of k-space.
pub fn make_lowfreq_mask((h, w): (usize, usize), keep_fraction: f64) -> Result<SamplingMask> {
    check_fraction(keep_fraction)?;
    if h == 0 || w == 0 {
        return Err(invalid("mask dimensions must be positive"));
    }
    let side = |n: usize| (((n as f64) * keep_fraction.sqrt()).round() as usize).clamp(1, n);
    let (a, b) = (side(h), side(w));
    let (r0, c0) = (h / 2 - a / 2, w / 2 - b / 2);
    let mut shifted = vec![false; h * w];
    for i in r0..r0 + a {
        for j in c0..c0 + b {
            shifted[i * w + j] = true;
        }
    }
    SamplingMask::new(h, w, ifftshift(&shifted, h, w))
}

/// Adds i.i.d. `N(0, sigma^2)` to the real and imaginary part of every
/// entry, or only of retained entries when `mask` is given.
pub fn add_noise(y: &ComplexImage, sigma: f64, seed: u64, mask: Option<&SamplingMask>) -> Result<ComplexImage> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("noise level {sigma} must be finite and >= 0")));
    }
    if let Some(m) = mask {
        if m.dims() != y.dims() {
            return Err(mismatch(format!("mask {:?} vs data {:?}", m.dims(), y.dims())));
        }
    }
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = y.clone();
    let (re, im) = out.planes_mut();
    for n in 0..re.len() {
        if mask.is_none_or(|m| m.keep()[n]) {
            re[n] += normal.sample(&mut rng);
            im[n] += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

struct Ellipse {
    ci: f64,
    cj: f64,
    ri: f64,
    rj: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, i: f64, j: f64) -> bool {
        let (di, dj) = (i - self.ci, j - self.cj);
        let (s, c) = self.angle.sin_cos();
        let u = c * di + s * dj;
        let v = -s * di + c * dj;
        (u / self.ri).powi(2) + (v / self.rj).powi(2) <= 1.0
    }
}

/// Random ellipse phantom with a smooth phase ramp and peak magnitude
/// [`PHANTOM_PEAK`]. The first ellipse is the support, the others are
/// nested inside it; the background is exactly zero.
pub fn make_phantom((h, w): (usize, usize), num_ellipses: usize, seed: u64) -> Result<ComplexImage> {
    if num_ellipses == 0 {
        return Err(invalid("phantom needs at least one ellipse"));
    }
    if h < 4 || w < 4 {
        return Err(invalid(format!("phantom of size {h}x{w} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hc, wc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let outer = Ellipse {
        ci: hc + rng.gen_range(-0.05..0.05) * h as f64,
        cj: wc + rng.gen_range(-0.05..0.05) * w as f64,
        ri: rng.gen_range(0.6..0.85) * h as f64 / 2.0,
        rj: rng.gen_range(0.6..0.85) * w as f64 / 2.0,
        angle: rng.gen_range(-0.3..0.3),
    };
    let mut inner = Vec::with_capacity(num_ellipses - 1);
    for _ in 1..num_ellipses {
        let (r, t) = (rng.gen_range(0.0..0.6f64).sqrt(), rng.gen_range(0.0..2.0 * PI));
        let e = Ellipse {
            ci: outer.ci + r * t.sin() * outer.ri * 0.8,
            cj: outer.cj + r * t.cos() * outer.rj * 0.8,
            ri: rng.gen_range(0.08..0.35) * outer.ri,
            rj: rng.gen_range(0.08..0.35) * outer.rj,
            angle: rng.gen_range(0.0..PI),
        };
        inner.push((e, rng.gen_range(-0.3..0.5)));
    }
    let (p0, pi_, pj) = (rng.gen_range(-PI..PI), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let mut mag = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (fi, fj) = (i as f64, j as f64);
            if !outer.contains(fi, fj) {
                continue;
            }
            let v: f64 = 1.0 + inner.iter().filter(|(e, _)| e.contains(fi, fj)).map(|(_, a)| a).sum::<f64>();
            mag[i * w + j] = v.max(0.1);
        }
    }
    let peak = mag.iter().copied().fold(0.0, f64::max);
    let scale = PHANTOM_PEAK / peak;
    Ok(ComplexImage::from_fn(h, w, |i, j| {
        let m = mag[i * w + j];
        if m == 0.0 {
            return num_complex::Complex64::new(0.0, 0.0);
        }
        let phase = p0 + PI / 2.0 * (pi_ * (i as f64 / h as f64 - 0.5) + pj * (j as f64 / w as f64 - 0.5));
        num_complex::Complex64::from_polar(m * scale, phase)
    }))
}

/// `y = M F x + masked noise`.
pub fn simulate_acquisition(x: &ComplexImage, spec: &AcquisitionSpec) -> Result<(ComplexImage, SamplingMask)> {
    spec.validate()?;
    let m = match spec.mask_kind {
        MaskKind::CenteredLowfreq => make_lowfreq_mask(x.dims(), spec.keep_fraction)?,
    };
    let clean = forward_a(x, &m)?;
    let y = add_noise(&clean, spec.sigma, spec.seed, Some(&m))?;
    Ok((y, m))
}
