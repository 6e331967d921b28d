//! Convolutional dictionary learning by alternating sparse coding and
//! projected gradient steps on the unit-norm filters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::fft::{fft2, ifft2};
use crate::image::ComplexImage;
use crate::operators::{Dictionary, FeatureMaps, FilterBank, SamplingMask, SynthesisOperator, POWER_ITERS, POWER_TOL};
use crate::solvers::{fista_solve_with, FistaConfig, LambdaMaps, ProxKind};

/// Multiplier on the largest magnitude used when no pre-training threshold
/// is configured.
pub const LAMBDA_SCALE: f64 = 0.05;

/// Safety factor on the filter-update Lipschitz estimate.
const LIPSCHITZ_MARGIN: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdlConfig {
    pub filters: usize,
    pub kernel_size: usize,
    /// `None` selects `LAMBDA_SCALE * max_l ||x_l||_inf`.
    #[serde(default)]
    pub lambda_pretrain: Option<f64>,
    pub outer_iters: usize,
    pub csc_fista_iters: usize,
    pub dict_step_iters: usize,
    pub seed: u64,
}

impl CdlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 {
            return Err(invalid("need at least one filter"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(invalid(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if let Some(l) = self.lambda_pretrain {
            if !(l > 0.0 && l.is_finite()) {
                return Err(invalid(format!("pre-training lambda {l} must be positive")));
            }
        }
        if self.outer_iters == 0 || self.csc_fista_iters == 0 || self.dict_step_iters == 0 {
            return Err(invalid("iteration counts must be positive"));
        }
        Ok(())
    }

    pub fn resolve_lambda(&self, images: &[ComplexImage]) -> f64 {
        self.lambda_pretrain
            .unwrap_or_else(|| LAMBDA_SCALE * images.iter().map(ComplexImage::max_abs).fold(0.0, f64::max))
    }
}

fn full_operator(d: &FilterBank, dims: (usize, usize)) -> Result<SynthesisOperator> {
    SynthesisOperator::new(d, &SamplingMask::full(dims.0, dims.1))
}

fn step_size(op: &SynthesisOperator) -> Result<f64> {
    let est = op.norm_sq(POWER_ITERS, POWER_TOL)?;
    Ok(0.99 / est.value)
}

fn uniform(op: &SynthesisOperator, lambda: f64) -> Result<LambdaMaps> {
    let (h, w) = op.dims();
    LambdaMaps::uniform(op.filters(), h, w, lambda, lambda)
}

/// `1/2 ||D s - x||^2 + lambda ||s||_1`.
pub fn csc_objective(x: &ComplexImage, d: &Dictionary, s: &FeatureMaps, lambda: f64) -> Result<f64> {
    let r = d.apply(s)?.sub(x);
    let l1: f64 = s.maps().iter().map(|m| (0..m.len()).map(|n| m.at(n).norm()).sum::<f64>()).sum();
    Ok(0.5 * r.norm_sq() + lambda * l1)
}

fn csc_run(op: &SynthesisOperator, tau: f64, x: &ComplexImage, lambda: f64, iters: usize, s0: &FeatureMaps) -> Result<FeatureMaps> {
    let cfg = FistaConfig { iterations: iters, tau, momentum_a: crate::solvers::fista::DEFAULT_MOMENTUM, prox: ProxKind::Modulus };
    let lam = uniform(op, lambda)?;
    let trace = fista_solve_with(op, &fft2(x), &lam, &cfg, s0, None)?;
    Ok(trace.final_codes)
}

/// Sparse codes of `x` under `d` with uniform threshold `lambda`:
/// `iters` FISTA steps on `1/2 ||D s - x||^2 + lambda ||s||_1` from zero.
pub fn csc_step(x_high: &ComplexImage, d: &FilterBank, lambda: f64, iters: usize) -> Result<FeatureMaps> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda {lambda} must be positive")));
    }
    let op = full_operator(d, x_high.dims())?;
    let (h, w) = x_high.dims();
    csc_run(&op, step_size(&op)?, x_high, lambda, iters, &FeatureMaps::zeros(d.len(), h, w))
}

/// Real cross-correlation of `r` with `s`, `Re sum_n r[n] conj(s[n - o])`,
/// read at the kernel offsets.
fn kernel_correlation(r_spec: &ComplexImage, s: &ComplexImage, kf: usize, out: &mut [f64]) {
    let (h, w) = s.dims();
    let s_spec = fft2(s);
    let root_n = ((h * w) as f64).sqrt();
    let prod = ComplexImage::from_fn(h, w, |i, j| r_spec.get(i, j) * s_spec.get(i, j).conj());
    let corr = ifft2(&prod);
    let c = kf / 2;
    for a in 0..kf {
        let i = (a + h - c) % h;
        for b in 0..kf {
            let j = (b + w - c) % w;
            out[a * kf + b] += root_n * corr.re()[i * w + j];
        }
    }
}

/// The linear map from filter taps to the synthesized images for fixed codes.
struct CodeOperator<'a> {
    codes: &'a [FeatureMaps],
    count: usize,
    kf: usize,
    dims: (usize, usize),
}

impl CodeOperator<'_> {
    fn apply(&self, taps: &[f64]) -> Result<Vec<ComplexImage>> {
        let bank = bank_unchecked(self.count, self.kf, taps);
        let d = Dictionary::new(&bank, self.dims.0, self.dims.1)?;
        self.codes.iter().map(|s| d.apply(s)).collect()
    }

    /// Gradient of `sum_l 1/2 ||x_l - G d||^2` is `-adjoint(residuals)`.
    fn adjoint(&self, images: &[ComplexImage]) -> Vec<f64> {
        let n = self.kf * self.kf;
        let parts: Vec<Vec<f64>> = images
            .par_iter()
            .zip(self.codes.par_iter())
            .map(|(r, s)| {
                let r_spec = fft2(r);
                let mut out = vec![0.0; self.count * n];
                for (k, map) in s.maps().iter().enumerate() {
                    kernel_correlation(&r_spec, map, self.kf, &mut out[k * n..(k + 1) * n]);
                }
                out
            })
            .collect();
        let mut acc = vec![0.0; self.count * n];
        for p in parts {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        acc
    }

    fn lipschitz(&self) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0d1c_7a55);
        let mut v: Vec<f64> = (0..self.count * self.kf * self.kf).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut rho = 0.0;
        for _ in 0..POWER_ITERS {
            let nv = norm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            let u = self.adjoint(&self.apply(&v)?);
            let next: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            let done = (next - rho).abs() <= POWER_TOL * next.abs();
            rho = next;
            v = u;
            if done || norm(&v) == 0.0 {
                break;
            }
        }
        if !rho.is_finite() {
            return Err(Error::NonFinite("filter update Lipschitz estimate".into()));
        }
        Ok(rho)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Filter bank without the unit-norm check, for intermediate iterates.
fn bank_unchecked(count: usize, kf: usize, taps: &[f64]) -> FilterBank {
    FilterBank::from_parts(kf, taps.chunks(kf * kf).take(count).map(<[f64]>::to_vec).collect())
}

fn project(count: usize, kf: usize, taps: &mut [f64], rng: &mut ChaCha8Rng) {
    for f in taps.chunks_mut(kf * kf).take(count) {
        let mut n = norm(f);
        while n == 0.0 || !n.is_finite() {
            f.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
            n = norm(f);
        }
        f.iter_mut().for_each(|v| *v /= n);
    }
}

fn fit(images: &[ComplexImage], synth: &[ComplexImage]) -> f64 {
    images.iter().zip(synth).map(|(x, y)| 0.5 * x.sub(y).norm_sq()).sum()
}

fn check_batch(images: &[ComplexImage], codes: &[FeatureMaps], d: &FilterBank) -> Result<()> {
    if images.is_empty() {
        return Err(invalid("dictionary update needs at least one image"));
    }
    if images.len() != codes.len() {
        return Err(mismatch(format!("{} images with {} code sets", images.len(), codes.len())));
    }
    for (x, s) in images.iter().zip(codes) {
        if s.dims() != x.dims() || s.len() != d.len() {
            return Err(mismatch("codes do not match images and filters"));
        }
    }
    Ok(())
}

/// `iters` projected gradient steps on the filters for fixed codes. A step
/// that would increase the fit is rejected and the update stops there.
/// Filters that become zero are redrawn from a generator seeded by `seed`.
pub fn dict_update(images: &[ComplexImage], codes: &[FeatureMaps], d: &FilterBank, iters: usize, seed: u64) -> Result<FilterBank> {
    check_batch(images, codes, d)?;
    let (count, kf) = (d.len(), d.kernel_size());
    let op = CodeOperator { codes, count, kf, dims: images[0].dims() };
    let lip = op.lipschitz()?;
    if lip == 0.0 {
        return Ok(d.clone());
    }
    let step = 1.0 / (LIPSCHITZ_MARGIN * lip);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taps = d.to_flat();
    let mut synth = op.apply(&taps)?;
    let mut current = fit(images, &synth);
    for _ in 0..iters {
        let residuals: Vec<ComplexImage> = images.iter().zip(&synth).map(|(x, y)| x.sub(y)).collect();
        let g = op.adjoint(&residuals);
        let mut next: Vec<f64> = taps.iter().zip(&g).map(|(t, gv)| t + step * gv).collect();
        project(count, kf, &mut next, &mut rng);
        let next_synth = op.apply(&next)?;
        let value = fit(images, &next_synth);
        if !value.is_finite() {
            return Err(Error::NonFinite("dictionary fit".into()));
        }
        if value > current {
            break;
        }
        taps = next;
        synth = next_synth;
        current = value;
    }
    FilterBank::from_flat(count, kf, &taps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdlReport {
    pub lambda: f64,
    /// Objective before the first round and after every round.
    pub objective_per_round: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CdlResult {
    pub bank: FilterBank,
    pub codes: Vec<FeatureMaps>,
    pub report: CdlReport,
}

fn total_objective(images: &[ComplexImage], d: &Dictionary, codes: &[FeatureMaps], lambda: f64) -> Result<Vec<f64>> {
    images.par_iter().zip(codes.par_iter()).map(|(x, s)| csc_objective(x, d, s, lambda)).collect()
}

/// Alternates sparse coding of every image and filter updates.
pub fn cdl_train(images_high: &[ComplexImage], cfg: &CdlConfig) -> Result<CdlResult> {
    cfg.validate()?;
    let first = images_high.first().ok_or_else(|| invalid("dictionary learning needs at least one image"))?;
    let dims = first.dims();
    if images_high.iter().any(|x| x.dims() != dims) {
        return Err(mismatch("training images differ in size"));
    }
    let lambda = cfg.resolve_lambda(images_high);
    if !(lambda > 0.0) {
        return Err(invalid("training images are all zero"));
    }
    let mut bank = FilterBank::random(cfg.filters, cfg.kernel_size, cfg.seed)?;
    let mut codes = vec![FeatureMaps::zeros(cfg.filters, dims.0, dims.1); images_high.len()];
    let dict = Dictionary::new(&bank, dims.0, dims.1)?;
    let mut per_image = total_objective(images_high, &dict, &codes, lambda)?;
    let mut objectives = vec![per_image.iter().sum::<f64>()];
    for round in 0..cfg.outer_iters {
        let op = full_operator(&bank, dims)?;
        let dict = Dictionary::new(&bank, dims.0, dims.1)?;
        let tau = step_size(&op)?;
        let updated: Vec<(FeatureMaps, f64)> = images_high
            .par_iter()
            .zip(codes.par_iter())
            .zip(per_image.par_iter())
            .map(|((x, s), &old)| {
                let s_new = csc_run(&op, tau, x, lambda, cfg.csc_fista_iters, s)?;
                let value = csc_objective(x, &dict, &s_new, lambda)?;
                Ok(if value <= old { (s_new, value) } else { (s.clone(), old) })
            })
            .collect::<Result<_>>()?;
        codes = updated.iter().map(|(s, _)| s.clone()).collect();
        let before_update: Vec<f64> = updated.iter().map(|(_, v)| *v).collect();

        let round_seed = cfg.seed.wrapping_add(round as u64 + 1);
        let candidate = dict_update(images_high, &codes, &bank, cfg.dict_step_iters, round_seed)?;
        let cand_dict = Dictionary::new(&candidate, dims.0, dims.1)?;
        let after = total_objective(images_high, &cand_dict, &codes, lambda)?;
        if after.iter().sum::<f64>() <= before_update.iter().sum::<f64>() {
            bank = candidate;
            per_image = after;
        } else {
            per_image = before_update;
        }
        objectives.push(per_image.iter().sum());
    }
    Ok(CdlResult { bank, codes, report: CdlReport { lambda, objective_per_round: objectives } })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(h: usize, w: usize, seed: u64) -> ComplexImage {
        FeatureMaps::random(1, h, w, seed).into_maps().remove(0)
    }

    #[test]
    fn huge_lambda_gives_zero_codes() {
        let x = random(8, 8, 1);
        let d = FilterBank::random(2, 3, 2).unwrap();
        let bound = d_adjoint_max(&x, &d);
        let s = csc_step(&x, &d, bound * 1.01, 50).unwrap();
        assert_eq!(s.norm(), 0.0);
    }

    fn d_adjoint_max(x: &ComplexImage, d: &FilterBank) -> f64 {
        let (h, w) = x.dims();
        Dictionary::new(d, h, w).unwrap().adjoint(x).unwrap().max_abs()
    }

    #[test]
    fn correlation_matches_direct_sum() {
        let (h, w, kf) = (6, 7, 3);
        let r = random(h, w, 3);
        let s = random(h, w, 4);
        let mut fast = vec![0.0; kf * kf];
        kernel_correlation(&fft2(&r), &s, kf, &mut fast);
        let c = kf / 2;
        for a in 0..kf {
            for b in 0..kf {
                let (oi, oj) = (a as isize - c as isize, b as isize - c as isize);
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        let si = (i as isize - oi).rem_euclid(h as isize) as usize;
                        let sj = (j as isize - oj).rem_euclid(w as isize) as usize;
                        acc += (r.get(i, j) * s.get(si, sj).conj()).re;
                    }
                }
                assert!((acc - fast[a * kf + b]).abs() < 1e-12, "{a} {b}");
            }
        }
    }

    #[test]
    fn delta_code_recovers_patch() {
        let (h, w, kf) = (8, 8, 3);
        let x = random(h, w, 5).real_part();
        let mut s = FeatureMaps::zeros(1, h, w);
        *s.map_mut(0) = ComplexImage::delta(h, w, 0, 0);
        let d0 = FilterBank::random(1, kf, 6).unwrap();
        let d = dict_update(&[x.clone()], &[s], &d0, 10, 0).unwrap();
        let c = kf / 2;
        let mut patch = vec![0.0; kf * kf];
        for a in 0..kf {
            for b in 0..kf {
                patch[a * kf + b] = x.get((a + h - c) % h, (b + w - c) % w).re;
            }
        }
        let n = norm(&patch);
        for (p, q) in patch.iter().zip(d.filter(0)) {
            assert!((p / n - q).abs() < 1e-6);
        }
    }

    #[test]
    fn update_keeps_unit_norm_and_descends() {
        let imgs: Vec<_> = (0..3).map(|i| random(8, 8, 10 + i)).collect();
        let codes: Vec<_> = (0..3).map(|i| FeatureMaps::random(2, 8, 8, 20 + i)).collect();
        let d0 = FilterBank::random(2, 3, 7).unwrap();
        let d1 = dict_update(&imgs, &codes, &d0, 10, 1).unwrap();
        for f in d1.filters() {
            assert!((norm(f) - 1.0).abs() < 1e-10);
        }
        let synth = |d: &FilterBank| {
            let dict = Dictionary::new(d, 8, 8).unwrap();
            codes.iter().map(|s| dict.apply(s).unwrap()).collect::<Vec<_>>()
        };
        assert!(fit(&imgs, &synth(&d1)) <= fit(&imgs, &synth(&d0)));
        assert!(dict_update(&[], &[], &d0, 1, 0).is_err());
    }

    #[test]
    fn training_is_deterministic_and_monotone() {
        let imgs: Vec<_> = (0..3).map(|i| random(8, 8, 30 + i)).collect();
        let cfg = CdlConfig {
            filters: 2,
            kernel_size: 3,
            lambda_pretrain: None,
            outer_iters: 4,
            csc_fista_iters: 20,
            dict_step_iters: 5,
            seed: 9,
        };
        let a = cdl_train(&imgs, &cfg).unwrap();
        let b = cdl_train(&imgs, &cfg).unwrap();
        assert_eq!(a.bank, b.bank);
        assert_eq!(a.report, b.report);
        for pair in a.report.objective_per_round.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-6);
        }
    }
}
