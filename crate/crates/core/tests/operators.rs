mod common;

use common::{codes_vec, max_diff, random_image, random_mask};
use convsynth::fft::{fft2, ifft2};
use convsynth::operators::{
    adjoint_a, adjoint_b, dict_adjoint, dict_apply, forward_a, forward_b, op_norm_sq, FeatureMaps, FilterBank,
    SamplingMask, POWER_ITERS, POWER_TOL,
};
use convsynth::simulate::make_lowfreq_mask;
use convsynth::ComplexImage;
use convsynth_testkit as tk;
use proptest::prelude::*;

#[test]
fn fft_matches_naive_dft() {
    let x = random_image(6, 5, 1);
    let naive = tk::dft2(&x.to_complex_vec(), 6, 5, false);
    assert!(max_diff(&fft2(&x).to_complex_vec(), &naive) < 1e-12);
    let inv = tk::dft2(&x.to_complex_vec(), 6, 5, true);
    assert!(max_diff(&ifft2(&x).to_complex_vec(), &inv) < 1e-12);
}

#[test]
fn dictionary_matches_spatial_convolution() {
    let d = FilterBank::random(2, 3, 7).unwrap();
    let s = FeatureMaps::random(2, 8, 8, 8);
    let mut expect = vec![num_complex::Complex64::new(0.0, 0.0); 64];
    for k in 0..2 {
        let part = tk::conv_kernel(&s.map(k).to_complex_vec(), 8, 8, d.filter(k), 3);
        for (e, p) in expect.iter_mut().zip(part) {
            *e += p;
        }
    }
    assert!(max_diff(&dict_apply(&s, &d).unwrap().to_complex_vec(), &expect) < 1e-12);
}

#[test]
fn dictionary_adjoint_matches_dense_transpose() {
    let d = FilterBank::random(2, 5, 3).unwrap();
    let x = random_image(8, 8, 4);
    let dense = tk::dictionary_matrix(8, 8, d.filters(), 5);
    let expect = dense.adjoint() * tk::to_vector(&x.to_complex_vec());
    let got = codes_vec(&dict_adjoint(&x, &d).unwrap());
    assert!(max_diff(&got, expect.as_slice()) < 1e-12);
}

#[test]
fn forward_model_matches_dense_matrix() {
    let m = random_mask(16, 16, 0.5, 5);
    let x = random_image(16, 16, 6);
    let a = tk::forward_matrix(16, 16, m.keep());
    let expect = &a * tk::to_vector(&x.to_complex_vec());
    assert!(max_diff(&forward_a(&x, &m).unwrap().to_complex_vec(), expect.as_slice()) < 1e-12);
    let y = forward_a(&random_image(16, 16, 7), &m).unwrap();
    let back = a.adjoint() * tk::to_vector(&y.to_complex_vec());
    assert!(max_diff(&adjoint_a(&y, &m).unwrap().to_complex_vec(), back.as_slice()) < 1e-12);
    let twice = adjoint_a(&forward_a(&adjoint_a(&y, &m).unwrap(), &m).unwrap(), &m).unwrap();
    assert!(max_diff(&twice.to_complex_vec(), &adjoint_a(&y, &m).unwrap().to_complex_vec()) < 1e-12);
}

#[test]
fn composite_matches_dense_matrix() {
    let d = FilterBank::random(2, 3, 9).unwrap();
    let m = random_mask(8, 8, 0.5, 10);
    let b = tk::synthesis_matrix(8, 8, d.filters(), 3, m.keep());
    let s = FeatureMaps::random(2, 8, 8, 11);
    let expect = &b * tk::to_vector(&codes_vec(&s));
    assert!(max_diff(&forward_b(&s, &d, &m).unwrap().to_complex_vec(), expect.as_slice()) < 1e-12);
    let y = random_image(8, 8, 12);
    let back = b.adjoint() * tk::to_vector(&y.to_complex_vec());
    // The adjoint sees only retained entries of y.
    let yy = m.apply(&y).unwrap();
    assert!(max_diff(&codes_vec(&adjoint_b(&yy, &d, &m).unwrap()), back.as_slice()) < 1e-12);
}

#[test]
fn delta_kernel_full_mask_is_fft() {
    let d = FilterBank::delta(1, 5).unwrap();
    let s = FeatureMaps::random(1, 8, 8, 13);
    let m = SamplingMask::full(8, 8);
    assert!(max_diff(&forward_b(&s, &d, &m).unwrap().to_complex_vec(), &fft2(s.map(0)).to_complex_vec()) < 1e-12);
}

#[test]
fn power_iteration_matches_svd() {
    for seed in 0..3 {
        let d = FilterBank::random(2, 3, 20 + seed).unwrap();
        let m = random_mask(8, 8, 0.5, 30 + seed);
        let dense = tk::spectral_norm_sq(&tk::synthesis_matrix(8, 8, d.filters(), 3, m.keep()));
        let est = op_norm_sq(&d, &m, (8, 8), 20_000, 1e-14).unwrap().value;
        assert!(tk::rel_err(est, dense, 0.0) <= 1e-4, "estimate {est} vs {dense}");
        let quick = op_norm_sq(&d, &m, (8, 8), POWER_ITERS, POWER_TOL).unwrap().value;
        assert!(quick <= dense * (1.0 + 1e-12) && quick >= 0.99 * dense);
    }
}

#[test]
fn norm_is_monotone_in_mask_nesting() {
    let d = FilterBank::random(3, 5, 2).unwrap();
    let mut previous = f64::INFINITY;
    for f in [1.0, 0.5, 0.25, 0.1] {
        let m = make_lowfreq_mask((16, 16), f).unwrap();
        let v = op_norm_sq(&d, &m, (16, 16), 20_000, 1e-14).unwrap().value;
        assert!(v <= previous * (1.0 + 1e-6), "{v} after {previous}");
        previous = v;
    }
}

fn image_strategy(h: usize, w: usize) -> impl Strategy<Value = ComplexImage> {
    prop::collection::vec((-1e3..1e3f64, -1e3..1e3f64), h * w).prop_map(move |v| {
        let (re, im) = v.into_iter().unzip();
        ComplexImage::new(h, w, re, im).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_round_trip(x in image_strategy(6, 10)) {
        let back = ifft2(&fft2(&x));
        prop_assert!(back.sub(&x).norm() <= 1e-12 * x.norm().max(1e-300));
        prop_assert!((fft2(&x).norm() - x.norm()).abs() <= 1e-12 * x.norm().max(1.0));
    }

    #[test]
    fn composite_adjoint_identity(seed in 0u64..1000, x in image_strategy(8, 8)) {
        let d = FilterBank::random(2, 3, seed).unwrap();
        let m = random_mask(8, 8, 0.5, seed + 1);
        let s = FeatureMaps::random(2, 8, 8, seed + 2);
        let lhs = convsynth::inner(&forward_b(&s, &d, &m).unwrap(), &x).unwrap();
        let rhs = s.inner(&adjoint_b(&x, &d, &m).unwrap()).unwrap();
        prop_assert!((lhs - rhs).norm() <= 1e-10 * s.norm() * x.norm());
    }

    #[test]
    fn masked_projection_is_contractive(x in image_strategy(8, 8)) {
        let m = make_lowfreq_mask((8, 8), 0.25).unwrap();
        prop_assert!(forward_a(&x, &m).unwrap().norm() <= x.norm() * (1.0 + 1e-12));
    }
}
