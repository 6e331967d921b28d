mod common;

use common::random_image;
use convsynth::lambda_maps::cnn::CnnParams;
use convsynth::lambda_maps::{maps_constant, maps_heuristic, MapSource, DEFAULT_BOUND};
use convsynth_testkit as tk;
use proptest::prelude::*;

fn straight_line(p: &CnnParams, x: &convsynth::ComplexImage) -> Vec<Vec<f64>> {
    let l = p.layers();
    let layer = |i: usize| tk::Layer {
        cin: l[i].in_channels,
        cout: l[i].out_channels,
        weights: &l[i].weights,
        bias: &l[i].bias,
    };
    let (h, w) = x.dims();
    tk::cnn_forward(x.re(), x.im(), h, w, &[layer(0), layer(1), layer(2), layer(3), layer(4)], p.bound())
}

#[test]
fn network_matches_straight_line_forward() {
    for seed in 0..3 {
        let p = CnnParams::init(3, DEFAULT_BOUND, seed, 1.0, None).unwrap();
        let x = random_image(8, 12, 100 + seed);
        let got = p.forward(&x).unwrap();
        let expect = straight_line(&p, &x);
        for (k, plane) in expect.iter().enumerate() {
            for (a, b) in got.map(k).values().iter().zip(plane) {
                assert!((a - b).abs() <= 1e-12 * DEFAULT_BOUND, "channel {k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn zero_network_is_half_bound() {
    let p = CnnParams::zeros(4, DEFAULT_BOUND).unwrap();
    let maps = p.forward(&random_image(16, 16, 2)).unwrap();
    assert!(maps.maps().iter().all(|m| m.values().iter().all(|&v| v == DEFAULT_BOUND / 2.0)));
}

#[test]
fn sources_check_channel_count() {
    let x = random_image(8, 8, 1);
    let net = MapSource::Network(CnnParams::zeros(2, 5.0).unwrap());
    assert!(net.maps(&x, 3).is_err());
    assert_eq!(net.maps(&x, 2).unwrap().len(), 2);
    assert_eq!(MapSource::constant(0.3).maps(&x, 3).unwrap().len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn network_maps_stay_in_bounds(seed in 0u64..1000, gain in 0.1..20.0f64, t in 0.5..20.0f64, scale in 1e-3..1e3f64) {
        let p = CnnParams::init(2, t, seed, gain, None).unwrap();
        let x = random_image(8, 8, seed + 7).scale(scale);
        let maps = p.forward(&x).unwrap();
        for m in maps.maps() {
            prop_assert!(m.values().iter().all(|&v| v > 0.0 && v <= t));
        }
    }

    #[test]
    fn constant_and_heuristic_maps_stay_in_bounds(lam in -5.0..50.0f64, seed in 0u64..1000, scale in 0.0..30.0f64) {
        let x = random_image(8, 8, seed);
        if let Ok(m) = maps_constant(lam, 2, (8, 8), DEFAULT_BOUND) {
            prop_assert!(m.maps().iter().all(|p| p.values().iter().all(|&v| v > 0.0 && v <= DEFAULT_BOUND)));
        }
        let h = maps_heuristic(&x, 2, scale, 3, DEFAULT_BOUND).unwrap();
        prop_assert!(h.maps().iter().all(|p| p.values().iter().all(|&v| v > 0.0 && v <= DEFAULT_BOUND)));
    }
}
