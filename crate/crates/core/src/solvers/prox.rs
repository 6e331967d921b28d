use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::image::{ComplexImage, RealImage};
use crate::operators::FeatureMaps;

/// Per-filter, per-pixel soft-threshold weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaMaps {
    maps: Vec<RealImage>,
    bound: f64,
}

impl LambdaMaps {
    /// Validates `0 < maps[k][j] <= bound` everywhere.
    pub fn new(maps: Vec<RealImage>, bound: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(invalid(format!("upper bound {bound} must be positive")));
        }
        let first = maps.first().ok_or_else(|| invalid("need at least one lambda map"))?;
        if maps.iter().any(|m| m.dims() != first.dims()) {
            return Err(mismatch("lambda maps have non-uniform dimensions"));
        }
        for (k, m) in maps.iter().enumerate() {
            if let Some(v) = m.values().iter().find(|&&v| !(v > 0.0 && v <= bound)) {
                return Err(invalid(format!("lambda map {k} has entry {v} outside (0, {bound}]")));
            }
        }
        Ok(Self { maps, bound })
    }

    pub fn uniform(count: usize, height: usize, width: usize, value: f64, bound: f64) -> Result<Self> {
        Self::new(vec![RealImage::filled(height, width, value); count], bound)
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

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn maps(&self) -> &[RealImage] {
        &self.maps
    }

    pub fn map(&self, k: usize) -> &RealImage {
        &self.maps[k]
    }

    pub(crate) fn check(&self, s: &FeatureMaps) -> Result<()> {
        if self.len() != s.len() || self.dims() != s.dims() {
            return Err(mismatch(format!(
                "{} lambda maps of {:?} vs {} code maps of {:?}",
                self.len(),
                self.dims(),
                s.len(),
                s.dims()
            )));
        }
        Ok(())
    }

    /// Channel indices sorted by decreasing map variance.
    pub fn order_by_variance(&self) -> Vec<usize> {
        let var: Vec<f64> = self.maps.iter().map(RealImage::variance).collect();
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
        idx
    }
}

/// How complex entries are shrunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxKind {
    /// Shrinks the complex modulus and keeps the phase; prox of `theta |z|`.
    #[default]
    Modulus,
    /// Thresholds real and imaginary parts independently; prox of
    /// `theta (|Re z| + |Im z|)`.
    Componentwise,
}

impl ProxKind {
    pub fn shrink(self, z: Complex64, theta: f64) -> Complex64 {
        match self {
            ProxKind::Modulus => {
                let r = z.norm();
                if r > theta {
                    z * (1.0 - theta / r)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            }
            ProxKind::Componentwise => Complex64::new(soft(z.re, theta), soft(z.im, theta)),
        }
    }

    /// Penalty `|z|` matching the shrinkage.
    pub fn penalty(self, z: Complex64) -> f64 {
        match self {
            ProxKind::Modulus => z.norm(),
            ProxKind::Componentwise => z.re.abs() + z.im.abs(),
        }
    }

    /// Vector-Jacobian product of [`ProxKind::shrink`] at `(z, theta)` with
    /// cotangent `g`. Returns `(dz, dtheta)`. The kink is taken on the zero
    /// branch.
    pub fn shrink_vjp(self, z: Complex64, theta: f64, g: Complex64) -> (Complex64, f64) {
        match self {
            ProxKind::Modulus => {
                let r = z.norm();
                if r <= theta {
                    return (Complex64::new(0.0, 0.0), 0.0);
                }
                let u = z / r;
                let radial = u.re * g.re + u.im * g.im;
                let tangential = g - u * radial;
                (g - tangential * (theta / r), -radial)
            }
            ProxKind::Componentwise => {
                let part = |v: f64, gv: f64| if v.abs() > theta { (gv, -v.signum() * gv) } else { (0.0, 0.0) };
                let (gr, tr) = part(z.re, g.re);
                let (gi, ti) = part(z.im, g.im);
                (Complex64::new(gr, gi), tr + ti)
            }
        }
    }
}

fn soft(v: f64, theta: f64) -> f64 {
    if v > theta {
        v - theta
    } else if v < -theta {
        v + theta
    } else {
        0.0
    }
}

/// Weighted complex soft-thresholding with thresholds `tau * lam[k][j]`.
pub fn weighted_soft_threshold(z: &FeatureMaps, lam: &LambdaMaps, tau: f64) -> Result<FeatureMaps> {
    weighted_soft_threshold_with(ProxKind::Modulus, z, lam, tau)
}

pub fn weighted_soft_threshold_with(
    kind: ProxKind,
    z: &FeatureMaps,
    lam: &LambdaMaps,
    tau: f64,
) -> Result<FeatureMaps> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("step size {tau} must be positive")));
    }
    lam.check(z)?;
    let maps = z
        .maps()
        .iter()
        .zip(lam.maps())
        .map(|(zk, lk)| shrink_plane(kind, zk, lk, tau))
        .collect();
    FeatureMaps::new(maps)
}

pub(crate) fn shrink_plane(kind: ProxKind, z: &ComplexImage, lam: &RealImage, tau: f64) -> ComplexImage {
    let mut out = ComplexImage::zeros(z.height(), z.width());
    for (n, &l) in lam.values().iter().enumerate() {
        out.set_at(n, kind.shrink(z.at(n), tau * l));
    }
    out
}

/// `sum_k sum_j lam[k][j] |s[k][j]|`.
pub fn weighted_l1(kind: ProxKind, s: &FeatureMaps, lam: &LambdaMaps) -> f64 {
    s.maps()
        .iter()
        .zip(lam.maps())
        .map(|(sk, lk)| lk.values().iter().enumerate().map(|(n, &l)| l * kind.penalty(sk.at(n))).sum::<f64>())
        .sum()
}
