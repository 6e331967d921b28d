//! Generators of the per-filter, per-pixel threshold maps.

pub mod cnn;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::image::{ComplexImage, RealImage};
use crate::solvers::LambdaMaps;

pub use cnn::{cnn_forward, CnnCache, CnnParams, ConvLayer};

/// Smallest threshold any generator emits.
pub const LAMBDA_FLOOR: f64 = 1e-6;

/// Default upper bound on threshold values.
pub const DEFAULT_BOUND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSource {
    Constant { lambda: f64, bound: f64 },
    Heuristic { scale: f64, window: usize, bound: f64 },
    Network(CnnParams),
}

impl MapSource {
    pub fn constant(lambda: f64) -> Self {
        MapSource::Constant { lambda, bound: DEFAULT_BOUND }
    }

    pub fn bound(&self) -> f64 {
        match self {
            MapSource::Constant { bound, .. } | MapSource::Heuristic { bound, .. } => *bound,
            MapSource::Network(p) => p.bound(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bound = self.bound();
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(invalid(format!("upper bound {bound} must be positive")));
        }
        match self {
            MapSource::Constant { lambda, .. } => check_constant(*lambda, bound),
            MapSource::Heuristic { scale, window, .. } => check_heuristic(*scale, *window),
            MapSource::Network(_) => Ok(()),
        }
    }

    /// Maps for `count` filters from the zero-filled image `x0`.
    pub fn maps(&self, x0: &ComplexImage, count: usize) -> Result<LambdaMaps> {
        self.validate()?;
        match self {
            MapSource::Constant { lambda, bound } => maps_constant(*lambda, count, x0.dims(), *bound),
            MapSource::Heuristic { scale, window, bound } => maps_heuristic(x0, count, *scale, *window, *bound),
            MapSource::Network(p) => {
                if p.filters() != count {
                    return Err(mismatch(format!("network emits {} maps, dictionary has {count}", p.filters())));
                }
                cnn_forward(x0, p)
            }
        }
    }
}

fn check_constant(lambda: f64, bound: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= bound) {
        return Err(invalid(format!("lambda {lambda} must lie in (0, {bound}]")));
    }
    Ok(())
}

fn check_heuristic(scale: f64, window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(invalid(format!("window {window} must be odd and at least 3")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid(format!("scale {scale} must be positive")));
    }
    Ok(())
}

pub fn maps_constant(lambda: f64, count: usize, dims: (usize, usize), bound: f64) -> Result<LambdaMaps> {
    check_constant(lambda, bound)?;
    LambdaMaps::uniform(count, dims.0, dims.1, lambda, bound)
}

/// Local standard deviation of `|x|` over a periodic `window x window`
/// neighbourhood.
pub fn local_std(x: &ComplexImage, window: usize) -> RealImage {
    let mag = x.abs();
    let (h, w) = mag.dims();
    let r = window / 2;
    let n = (window * window) as f64;
    let v = mag.values();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (mut s, mut s2) = (0.0, 0.0);
            for a in 0..window {
                let ii = (i + h * window + a - r) % h;
                for b in 0..window {
                    let jj = (j + w * window + b - r) % w;
                    let m = v[ii * w + jj];
                    s += m;
                    s2 += m * m;
                }
            }
            let mean = s / n;
            out[i * w + j] = (s2 / n - mean * mean).max(0.0).sqrt();
        }
    }
    RealImage::new(h, w, out).expect("local deviations are finite")
}

/// Training-free maps: low thresholds where `|x0|` has local detail.
pub fn maps_heuristic(x0: &ComplexImage, count: usize, scale: f64, window: usize, bound: f64) -> Result<LambdaMaps> {
    check_heuristic(scale, window)?;
    let sd = local_std(x0, window);
    let peak = sd.max();
    let (h, w) = sd.dims();
    let plane: Vec<f64> = sd
        .values()
        .iter()
        .map(|&s| {
            let norm = if peak > 0.0 { s / peak } else { 0.0 };
            (scale * (1.0 - norm)).clamp(LAMBDA_FLOOR, bound)
        })
        .collect();
    let maps = (0..count).map(|_| RealImage::new(h, w, plane.clone())).collect::<Result<Vec<_>>>()?;
    LambdaMaps::new(maps, bound)
}
