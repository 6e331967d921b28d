#![allow(dead_code)]

use convsynth::operators::{FeatureMaps, SamplingMask};
use convsynth::ComplexImage;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
    FeatureMaps::random(1, h, w, seed).into_maps().remove(0)
}

pub fn random_mask(h: usize, w: usize, fraction: f64, seed: u64) -> SamplingMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(fraction)).collect();
    keep[0] = true;
    SamplingMask::new(h, w, keep).unwrap()
}

pub fn codes_vec(s: &FeatureMaps) -> Vec<Complex64> {
    s.maps().iter().flat_map(|m| m.to_complex_vec()).collect()
}

pub fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
}
