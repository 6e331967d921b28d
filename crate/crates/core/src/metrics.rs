//! PSNR and SSIM on magnitude images restricted to the object support.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::image::{ComplexImage, RealImage};

pub const DEFAULT_THRESHOLD: f64 = 0.05;
pub const PSNR_CAP: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimSettings {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range; `None` uses the target maximum over the mask.
    #[serde(default)]
    pub data_range: Option<f64>,
}

impl Default for SsimSettings {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSettings {
    #[serde(default = "default_threshold")]
    pub threshold_fraction: f64,
    #[serde(default = "default_cap")]
    pub psnr_cap: f64,
    #[serde(default)]
    pub ssim: SsimSettings,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_cap() -> f64 {
    PSNR_CAP
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { threshold_fraction: DEFAULT_THRESHOLD, psnr_cap: PSNR_CAP, ssim: SsimSettings::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mask_pixels: usize,
}

fn binary(h: usize, w: usize, on: &[bool]) -> RealImage {
    RealImage::new(h, w, on.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).expect("binary values are finite")
}

fn dilate(on: &[bool], h: usize, w: usize) -> Vec<bool> {
    neighbourhood(on, h, w, false)
}

fn erode(on: &[bool], h: usize, w: usize) -> Vec<bool> {
    neighbourhood(on, h, w, true)
}

/// Logical AND (`all`) or OR of the in-bounds 3x3 neighbourhood of every pixel.
fn neighbourhood(on: &[bool], h: usize, w: usize, all: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut it = (i.saturating_sub(1)..(i + 2).min(h))
                .flat_map(|a| (j.saturating_sub(1)..(j + 2).min(w)).map(move |b| on[a * w + b]));
            out[i * w + j] = if all { it.all(|v| v) } else { it.any(|v| v) };
        }
    }
    out
}

/// `|target| > fraction * max |target|`, followed by a 3x3 closing.
pub fn signal_mask(target: &ComplexImage, threshold_fraction: f64) -> Result<RealImage> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(invalid(format!("threshold fraction {threshold_fraction} must lie in (0, 1)")));
    }
    let mag = target.abs();
    let peak = mag.max();
    if peak == 0.0 {
        return Err(invalid("cannot derive a signal mask from an all-zero target"));
    }
    let (h, w) = mag.dims();
    let on: Vec<bool> = mag.values().iter().map(|&v| v > threshold_fraction * peak).collect();
    let closed = erode(&dilate(&on, h, w), h, w);
    Ok(binary(h, w, &closed))
}

fn check(x: &ComplexImage, target: &ComplexImage, mask: &RealImage) -> Result<usize> {
    x.same_dims(target)?;
    if mask.dims() != x.dims() {
        return Err(mismatch(format!("mask {:?} vs image {:?}", mask.dims(), x.dims())));
    }
    let count = mask.values().iter().filter(|&&v| v > 0.0).count();
    if count == 0 {
        return Err(invalid("metric mask is empty"));
    }
    Ok(count)
}

fn masked_peak(target: &RealImage, mask: &RealImage) -> f64 {
    target.values().iter().zip(mask.values()).filter(|(_, &m)| m > 0.0).map(|(&v, _)| v).fold(0.0, f64::max)
}

pub fn psnr_masked(x: &ComplexImage, target: &ComplexImage, mask: &RealImage) -> Result<f64> {
    psnr_masked_with(x, target, mask, PSNR_CAP)
}

pub fn psnr_masked_with(x: &ComplexImage, target: &ComplexImage, mask: &RealImage, cap: f64) -> Result<f64> {
    let count = check(x, target, mask)?;
    let (a, b) = (x.abs(), target.abs());
    let peak = masked_peak(&b, mask);
    let sse: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .zip(mask.values())
        .filter(|(_, &m)| m > 0.0)
        .map(|((p, q), _)| (p - q) * (p - q))
        .sum();
    let mse = sse / count as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(cap))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut out = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            out.push(a * b / (s * s));
        }
    }
    out
}

pub fn ssim_masked(x: &ComplexImage, target: &ComplexImage, mask: &RealImage) -> Result<f64> {
    ssim_masked_with(x, target, mask, &SsimSettings::default())
}

/// Mean local SSIM over windows lying inside the image whose centres are in
/// the mask. Both magnitude images are set to zero outside the mask first.
pub fn ssim_masked_with(x: &ComplexImage, target: &ComplexImage, mask: &RealImage, s: &SsimSettings) -> Result<f64> {
    check(x, target, mask)?;
    if s.window % 2 == 0 || s.window == 0 || !(s.sigma > 0.0) {
        return Err(invalid(format!("window {} with sigma {} is degenerate", s.window, s.sigma)));
    }
    let (h, w) = x.dims();
    if h < s.window || w < s.window {
        return Err(invalid(format!("image {h}x{w} is smaller than the {0}x{0} window", s.window)));
    }
    let (a, b) = (x.abs(), target.abs());
    let range = s.data_range.unwrap_or_else(|| masked_peak(&b, mask));
    let c1 = (s.k1 * range).powi(2);
    let c2 = (s.k2 * range).powi(2);
    let g = gaussian_window(s.window, s.sigma);
    let r = s.window / 2;
    let restrict = |v: &RealImage| -> Vec<f64> {
        v.values().iter().zip(mask.values()).map(|(&p, &m)| if m > 0.0 { p } else { 0.0 }).collect()
    };
    let (av, bv) = (restrict(&a), restrict(&b));
    let mut total = 0.0;
    let mut count = 0usize;
    for i in r..h - r {
        for j in r..w - r {
            if mask.values()[i * w + j] <= 0.0 {
                continue;
            }
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for p in 0..s.window {
                for q in 0..s.window {
                    let n = (i + p - r) * w + (j + q - r);
                    let wt = g[p * s.window + q];
                    let (u, v) = (av[n], bv[n]);
                    mx += wt * u;
                    my += wt * v;
                    sxx += wt * u * u;
                    syy += wt * v * v;
                    sxy += wt * u * v;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += if num == den { 1.0 } else { num / den };
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("no SSIM window centre lies inside the mask"));
    }
    Ok(total / count as f64)
}

/// Both metrics on the mask derived from `target`.
pub fn evaluate(x: &ComplexImage, target: &ComplexImage, settings: &MetricSettings) -> Result<MetricReport> {
    let mask = signal_mask(target, settings.threshold_fraction)?;
    let psnr = psnr_masked_with(x, target, &mask, settings.psnr_cap)?;
    let ssim = ssim_masked_with(x, target, &mask, &settings.ssim)?;
    let mask_pixels = mask.values().iter().filter(|&&v| v > 0.0).count();
    Ok(MetricReport { psnr, ssim, mask_pixels })
}
