//! Smooth/detail image splitting.
//!
//! The smooth part solves `(I + beta * grad^T grad) x_low = x0` with periodic
//! forward differences; the detail part is `x0 - x_low`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::ComplexImage;
use crate::operators::{forward_a, SamplingMask};
use crate::solvers::cg::{cg_record, CgTape};

pub const CG_ITERS: usize = 50;
pub const CG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighpassConfig {
    pub beta: f64,
    #[serde(default = "default_iters")]
    pub cg_iters: usize,
    #[serde(default = "default_tol")]
    pub cg_tol: f64,
}

fn default_iters() -> usize {
    CG_ITERS
}

fn default_tol() -> f64 {
    CG_TOL
}

impl HighpassConfig {
    pub fn new(beta: f64) -> Self {
        Self { beta, cg_iters: CG_ITERS, cg_tol: CG_TOL }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if self.cg_iters == 0 {
            return Err(invalid("cg_iters must be positive"));
        }
        Ok(())
    }
}

fn check_dims(x: &ComplexImage) -> Result<()> {
    if x.height() < 2 && x.width() < 2 {
        return Err(invalid("gradient of a 1x1 image is degenerate"));
    }
    Ok(())
}

fn forward_diff(plane: &[f64], h: usize, w: usize, out_h: &mut [f64], out_v: &mut [f64]) {
    for i in 0..h {
        let down = ((i + 1) % h) * w;
        for j in 0..w {
            let here = plane[i * w + j];
            out_h[i * w + j] = plane[i * w + (j + 1) % w] - here;
            out_v[i * w + j] = plane[down + j] - here;
        }
    }
}

/// Periodic forward differences `(horizontal, vertical)`.
pub fn grad(x: &ComplexImage) -> Result<(ComplexImage, ComplexImage)> {
    check_dims(x)?;
    let (h, w) = x.dims();
    let mut gh = ComplexImage::zeros(h, w);
    let mut gv = ComplexImage::zeros(h, w);
    {
        let (hr, hi) = gh.planes_mut();
        let (vr, vi) = gv.planes_mut();
        forward_diff(x.re(), h, w, hr, vr);
        forward_diff(x.im(), h, w, hi, vi);
    }
    Ok((gh, gv))
}

/// Negative adjoint of [`grad`]: `<grad x, p> = <x, -div p>`.
pub fn div(ph: &ComplexImage, pv: &ComplexImage) -> Result<ComplexImage> {
    ph.same_dims(pv)?;
    check_dims(ph)?;
    let (h, w) = ph.dims();
    let mut out = ComplexImage::zeros(h, w);
    let (or, oi) = out.planes_mut();
    let planes = [(ph.re(), pv.re()), (ph.im(), pv.im())];
    for ((a, b), o) in planes.into_iter().zip([or, oi]) {
        for i in 0..h {
            let up = ((i + h - 1) % h) * w;
            for j in 0..w {
                let n = i * w + j;
                o[n] = a[n] - a[i * w + (j + w - 1) % w] + b[n] - b[up + j];
            }
        }
    }
    Ok(out)
}

/// `grad^T grad x`, the periodic 5-point Laplacian with positive diagonal.
pub fn laplacian(x: &ComplexImage) -> ComplexImage {
    let (h, w) = x.dims();
    let mut out = ComplexImage::zeros(h, w);
    let (or, oi) = out.planes_mut();
    for (src, o) in [x.re(), x.im()].into_iter().zip([or, oi]) {
        for i in 0..h {
            let up = ((i + h - 1) % h) * w;
            let down = ((i + 1) % h) * w;
            for j in 0..w {
                let n = i * w + j;
                let left = src[i * w + (j + w - 1) % w];
                let right = src[i * w + (j + 1) % w];
                o[n] = 4.0 * src[n] - left - right - src[up + j] - src[down + j];
            }
        }
    }
    out
}

fn system(beta: f64) -> impl Fn(&ComplexImage) -> ComplexImage {
    move |v: &ComplexImage| v.add_scaled(beta, &laplacian(v))
}

#[derive(Debug, Clone)]
pub struct Split {
    pub low: ComplexImage,
    pub high: ComplexImage,
    pub cg_converged: bool,
    pub cg_residual: f64,
    pub cg_iterations: usize,
}

/// Recorded smooth-part solve for differentiation with respect to `beta`.
#[derive(Debug, Clone)]
pub struct LowpassTape {
    beta: f64,
    cg: CgTape,
}

/// Spacing of the doubles around `v`, or `None` where it is subnormal.
fn ulp(v: f64) -> Option<f64> {
    let e = v.abs().to_bits() >> 52;
    (e > 52).then(|| f64::from_bits((e - 52) << 52))
}

/// Moves `low` by at most half a last place of `x` or of `x - low` so that
/// `low + high` reproduces `x` bitwise. Where both parts lie in a higher
/// binade than `x` no such pair exists and `high = x - low` is returned.
fn exact_part(x: f64, low: f64) -> (f64, f64) {
    if x == 0.0 {
        return (low, -low);
    }
    if let Some(g) = ulp(x) {
        let q = low / g;
        if q.is_finite() {
            let l = q.round() * g;
            let h = x - l;
            if l + h == x {
                return (l, h);
            }
        }
    }
    let h = x - low;
    let l = x - h;
    if l + h == x {
        return (l, h);
    }
    (low, h)
}

fn exact_split(x0: &ComplexImage, low: &ComplexImage) -> Result<(ComplexImage, ComplexImage)> {
    let (h, w) = x0.dims();
    let parts = |a: &[f64], b: &[f64]| -> (Vec<f64>, Vec<f64>) { a.iter().zip(b).map(|(&x, &l)| exact_part(x, l)).unzip() };
    let (lr, hr) = parts(x0.re(), low.re());
    let (li, hi) = parts(x0.im(), low.im());
    Ok((ComplexImage::new(h, w, lr, li)?, ComplexImage::new(h, w, hr, hi)?))
}

pub fn lowpass_split(x0: &ComplexImage, cfg: &HighpassConfig) -> Result<Split> {
    lowpass_record(x0, cfg).map(|(s, _)| s)
}

pub fn lowpass_record(x0: &ComplexImage, cfg: &HighpassConfig) -> Result<(Split, LowpassTape)> {
    cfg.validate()?;
    check_dims(x0)?;
    let (res, tape) = cg_record(system(cfg.beta), x0, cfg.cg_iters, cfg.cg_tol)?;
    let (low, high) = exact_split(x0, &res.x)?;
    let split = Split {
        low,
        high,
        cg_converged: res.converged,
        cg_residual: res.residual,
        cg_iterations: res.iterations,
    };
    Ok((split, LowpassTape { beta: cfg.beta, cg: tape }))
}

impl LowpassTape {
    /// Derivative of `<low_bar, x_low>` with respect to `beta`.
    pub fn beta_gradient(&self, low_bar: &ComplexImage) -> f64 {
        let mut acc = 0.0;
        self.cg.backward(low_bar, system(self.beta), |p, qb| acc += qb.real_dot(&laplacian(p)));
        acc
    }
}

/// `y - A x_low`.
pub fn residual_data(y: &ComplexImage, x_low: &ComplexImage, m: &SamplingMask) -> Result<ComplexImage> {
    y.same_dims(x_low)?;
    Ok(y.sub(&forward_a(x_low, m)?))
}
