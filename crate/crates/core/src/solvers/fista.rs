//! FISTA with the `t_n = (n + a - 1) / a` momentum rule, which for `a > 2`
//! yields convergence of the iterates and not only of the objective.

use serde::{Deserialize, Serialize};

use super::prox::{shrink_plane, weighted_l1, LambdaMaps, ProxKind};
use crate::error::{invalid, mismatch, Error, Result};
use crate::image::ComplexImage;
use crate::operators::{FeatureMaps, FilterBank, SamplingMask, SynthesisOperator};

pub const DEFAULT_MOMENTUM: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FistaConfig {
    pub iterations: usize,
    pub tau: f64,
    #[serde(default = "default_momentum")]
    pub momentum_a: f64,
    #[serde(default)]
    pub prox: ProxKind,
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

impl FistaConfig {
    pub fn new(iterations: usize, tau: f64) -> Self {
        Self { iterations, tau, momentum_a: DEFAULT_MOMENTUM, prox: ProxKind::Modulus }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("FISTA needs at least one iteration"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("step size {} must be positive", self.tau)));
        }
        if !(self.momentum_a > 2.0 && self.momentum_a.is_finite()) {
            return Err(invalid(format!("momentum parameter {} must exceed 2", self.momentum_a)));
        }
        Ok(())
    }

    /// Extrapolation weight `(t_n - 1) / t_{n+1}` applied after iteration `n >= 1`.
    pub fn extrapolation(&self, n: usize) -> f64 {
        let a = self.momentum_a;
        let t = |n: usize| (n as f64 + a - 1.0) / a;
        (t(n) - 1.0) / t(n + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FistaTrace {
    /// Objective at `s_0, ..., s_T`.
    pub objective_per_iter: Vec<f64>,
    pub final_codes: FeatureMaps,
}

/// Pre-prox points `z_n` of every iteration, for reverse-mode replay.
#[derive(Debug, Clone)]
pub struct FistaTape {
    cfg: FistaConfig,
    lam: LambdaMaps,
    z: Vec<FeatureMaps>,
}

/// `1/2 ||B s - y||^2 + sum lam |s|`.
pub fn objective(op: &SynthesisOperator, s: &FeatureMaps, y: &ComplexImage, lam: &LambdaMaps, kind: ProxKind) -> Result<f64> {
    let r = op.forward(s)?.sub(&op.mask().apply(y)?);
    Ok(0.5 * r.norm_sq() + weighted_l1(kind, s, lam))
}

fn check_step(cfg: &FistaConfig, norm_sq: Option<f64>) -> Result<()> {
    if let Some(l) = norm_sq {
        let limit = 1.0 / l;
        if cfg.tau > limit {
            return Err(Error::StepSize { tau: cfg.tau, limit });
        }
    }
    Ok(())
}

struct Run {
    codes: FeatureMaps,
    objectives: Vec<f64>,
    z: Vec<FeatureMaps>,
}

fn run(
    op: &SynthesisOperator,
    y: &ComplexImage,
    lam: &LambdaMaps,
    cfg: &FistaConfig,
    s0: &FeatureMaps,
    accelerate: bool,
    track_objective: bool,
    record: bool,
) -> Result<Run> {
    cfg.validate()?;
    lam.check(s0)?;
    if s0.len() != op.filters() || s0.dims() != op.dims() || y.dims() != op.dims() {
        return Err(mismatch("FISTA inputs do not match the operator"));
    }
    let kind = cfg.prox;
    let mut objectives = Vec::with_capacity(if track_objective { cfg.iterations + 1 } else { 0 });
    if track_objective {
        objectives.push(objective(op, s0, y, lam, kind)?);
    }
    let mut z_tape = Vec::with_capacity(if record { cfg.iterations } else { 0 });
    let mut prev = s0.clone();
    let mut point = s0.clone();
    for n in 1..=cfg.iterations {
        let grad = op.residual_gradient(&point, y)?;
        let z = point.add_scaled(-cfg.tau, &grad);
        let maps = z.maps().iter().zip(lam.maps()).map(|(zk, lk)| shrink_plane(kind, zk, lk, cfg.tau)).collect();
        let next = FeatureMaps::new(maps)?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("FISTA iterate {n}")));
        }
        if record {
            z_tape.push(z);
        }
        if track_objective {
            objectives.push(objective(op, &next, y, lam, kind)?);
        }
        let gamma = if accelerate { cfg.extrapolation(n) } else { 0.0 };
        point = next.scale(1.0 + gamma).add_scaled(-gamma, &prev);
        prev = next;
    }
    Ok(Run { codes: prev, objectives, z: z_tape })
}

/// Runs `cfg.iterations` FISTA steps on `min_s 1/2 ||B s - y||^2 + ||lam s||_1`.
///
/// When `norm_sq` (an estimate of `||B||^2`) is supplied the step size is
/// checked against it.
pub fn fista_solve_with(
    op: &SynthesisOperator,
    y: &ComplexImage,
    lam: &LambdaMaps,
    cfg: &FistaConfig,
    s0: &FeatureMaps,
    norm_sq: Option<f64>,
) -> Result<FistaTrace> {
    check_step(cfg, norm_sq)?;
    let r = run(op, y, lam, cfg, s0, true, true, false)?;
    Ok(FistaTrace { objective_per_iter: r.objectives, final_codes: r.codes })
}

pub fn fista_solve(
    y: &ComplexImage,
    d: &FilterBank,
    m: &SamplingMask,
    lam: &LambdaMaps,
    cfg: &FistaConfig,
    s0: &FeatureMaps,
) -> Result<FistaTrace> {
    fista_solve_with(&SynthesisOperator::new(d, m)?, y, lam, cfg, s0, None)
}

/// Plain proximal gradient with the same step and prox.
pub fn ista_solve(
    op: &SynthesisOperator,
    y: &ComplexImage,
    lam: &LambdaMaps,
    cfg: &FistaConfig,
    s0: &FeatureMaps,
) -> Result<FistaTrace> {
    let r = run(op, y, lam, cfg, s0, false, true, false)?;
    Ok(FistaTrace { objective_per_iter: r.objectives, final_codes: r.codes })
}

/// Forward pass that keeps what the backward pass needs. Skips objective
/// evaluation.
pub fn fista_record(
    op: &SynthesisOperator,
    y: &ComplexImage,
    lam: &LambdaMaps,
    cfg: &FistaConfig,
    s0: &FeatureMaps,
) -> Result<(FeatureMaps, FistaTape)> {
    let r = run(op, y, lam, cfg, s0, true, false, true)?;
    Ok((r.codes, FistaTape { cfg: *cfg, lam: lam.clone(), z: r.z }))
}

/// Cotangents of the data and of the threshold maps.
#[derive(Debug, Clone)]
pub struct FistaGrads {
    pub data: ComplexImage,
    pub lambda: Vec<Vec<f64>>,
}

impl FistaTape {
    pub fn iterations(&self) -> usize {
        self.z.len()
    }

    /// Smallest distance `| |z| - theta |` over all recorded prox inputs; the
    /// pipeline is non-differentiable where this is zero.
    pub fn kink_margin(&self) -> f64 {
        let tau = self.cfg.tau;
        let mut margin = f64::INFINITY;
        for z in &self.z {
            for (zk, lk) in z.maps().iter().zip(self.lam.maps()) {
                for (n, &l) in lk.values().iter().enumerate() {
                    let theta = tau * l;
                    let v = zk.at(n);
                    let d = match self.cfg.prox {
                        ProxKind::Modulus => (v.norm() - theta).abs(),
                        ProxKind::Componentwise => (v.re.abs() - theta).abs().min((v.im.abs() - theta).abs()),
                    };
                    margin = margin.min(d);
                }
            }
        }
        margin
    }

    /// Which side of the threshold every recorded prox input lies on.
    pub fn active_pattern(&self) -> Vec<bool> {
        let tau = self.cfg.tau;
        let mut out = Vec::new();
        for z in &self.z {
            for (zk, lk) in z.maps().iter().zip(self.lam.maps()) {
                for (n, &l) in lk.values().iter().enumerate() {
                    let theta = tau * l;
                    let v = zk.at(n);
                    match self.cfg.prox {
                        ProxKind::Modulus => out.push(v.norm() > theta),
                        ProxKind::Componentwise => {
                            out.push(v.re.abs() > theta);
                            out.push(v.im.abs() > theta);
                        }
                    }
                }
            }
        }
        out
    }

    /// Reverse pass given the cotangent of the final iterate `s_T`.
    pub fn backward(&self, op: &SynthesisOperator, codes_bar: &FeatureMaps) -> Result<FistaGrads> {
        let cfg = &self.cfg;
        let tau = cfg.tau;
        let (h, w) = op.dims();
        let count = op.filters();
        let mut data_bar = ComplexImage::zeros(h, w);
        let mut lam_bar = vec![vec![0.0; h * w]; count];

        // Cotangents of x_n, x_{n-1} and y_{n+1} while walking backwards.
        let mut x_bar = codes_bar.clone();
        let mut x_prev_bar = FeatureMaps::zeros(count, h, w);
        let mut y_next_bar: Option<FeatureMaps> = None;

        for n in (1..=self.z.len()).rev() {
            if let Some(yb) = &y_next_bar {
                let gamma = cfg.extrapolation(n);
                x_bar.axpy(1.0 + gamma, yb);
                x_prev_bar.axpy(-gamma, yb);
            }
            let z = &self.z[n - 1];
            let mut z_bar = FeatureMaps::zeros(count, h, w);
            for k in 0..count {
                let lk = self.lam.map(k).values();
                let zk = z.map(k);
                let gk = x_bar.map(k);
                let out = z_bar.map_mut(k);
                for (j, &l) in lk.iter().enumerate() {
                    let (dz, dtheta) = cfg.prox.shrink_vjp(zk.at(j), tau * l, gk.at(j));
                    out.set_at(j, dz);
                    lam_bar[k][j] += tau * dtheta;
                }
            }
            // z_n = y_n - tau B^H B y_n + tau B^H y'; `bz` is a masked spectrum.
            let bz = op.forward(&z_bar)?;
            data_bar.axpy(tau, &bz);
            let y_bar = z_bar.add_scaled(-tau, &op.dictionary().analysis_from_spectrum(&bz.to_complex_vec()));
            y_next_bar = Some(y_bar);
            x_bar = std::mem::replace(&mut x_prev_bar, FeatureMaps::zeros(count, h, w));
        }
        Ok(FistaGrads { data: data_bar, lambda: lam_bar })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::ifft2;
    use crate::solvers::prox::weighted_soft_threshold;

    #[test]
    fn config_validation() {
        assert!(FistaConfig::new(0, 1.0).validate().is_err());
        assert!(FistaConfig::new(1, 0.0).validate().is_err());
        let mut c = FistaConfig::new(1, 1.0);
        c.momentum_a = 2.0;
        assert!(c.validate().is_err());
        assert_eq!(FistaConfig::new(1, 1.0).extrapolation(1), 0.0);
    }

    #[test]
    fn unregularized_unitary_problem_recovers_inverse_fft() {
        let y = FeatureMaps::random(1, 8, 8, 3).into_maps().remove(0);
        let bank = FilterBank::delta(1, 3).unwrap();
        let m = SamplingMask::full(8, 8);
        let lam = LambdaMaps::uniform(1, 8, 8, 1e-12, 10.0).unwrap();
        let trace =
            fista_solve(&y, &bank, &m, &lam, &FistaConfig::new(200, 0.99), &FeatureMaps::zeros(1, 8, 8)).unwrap();
        let expect = ifft2(&y);
        assert!(trace.final_codes.map(0).sub(&expect).norm() <= 1e-6 * expect.norm());
        assert_eq!(trace.objective_per_iter.len(), 201);
        assert!(*trace.objective_per_iter.last().unwrap() < 1e-9);
    }

    #[test]
    fn orthonormal_lasso_closed_form() {
        let y = FeatureMaps::random(1, 8, 8, 4).into_maps().remove(0);
        let bank = FilterBank::delta(1, 3).unwrap();
        let m = SamplingMask::full(8, 8);
        let lam = LambdaMaps::uniform(1, 8, 8, 0.3, 10.0).unwrap();
        let trace =
            fista_solve(&y, &bank, &m, &lam, &FistaConfig::new(200, 1.0), &FeatureMaps::zeros(1, 8, 8)).unwrap();
        let bhy = FeatureMaps::new(vec![ifft2(&y)]).unwrap();
        let expect = weighted_soft_threshold(&bhy, &lam, 1.0).unwrap();
        assert!(trace.final_codes.add_scaled(-1.0, &expect).norm() < 1e-6);
    }

    #[test]
    fn step_size_violation_is_reported() {
        let bank = FilterBank::delta(1, 3).unwrap();
        let op = SynthesisOperator::new(&bank, &SamplingMask::full(4, 4)).unwrap();
        let lam = LambdaMaps::uniform(1, 4, 4, 0.1, 10.0).unwrap();
        let y = ComplexImage::zeros(4, 4);
        let err = fista_solve_with(&op, &y, &lam, &FistaConfig::new(3, 1.5), &FeatureMaps::zeros(1, 4, 4), Some(1.0));
        assert!(matches!(err, Err(Error::StepSize { .. })));
    }
}
