use convsynth::lambda_maps::{CnnParams, MapSource, DEFAULT_BOUND};
use convsynth::operators::FilterBank;
use convsynth::simulate::{make_phantom, simulate_acquisition, AcquisitionSpec, MaskKind};
use convsynth::training::{mse, train, Model, Pipeline, Sample, TrainConfig, Trainer};
use convsynth_testkit as tk;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn sample(seed: u64, size: usize) -> Sample {
    let target = make_phantom((size, size), 4, seed).unwrap();
    let spec = AcquisitionSpec { sigma: 0.15, keep_fraction: 0.25, mask_kind: MaskKind::CenteredLowfreq, seed: seed + 1 };
    let (y, mask) = simulate_acquisition(&target, &spec).unwrap();
    Sample { y, mask, target }
}

fn loss(p: &Pipeline, s: &Sample, m: &Model) -> (f64, Vec<bool>) {
    let (x, tape) = p.forward(&s.y, m).unwrap();
    (mse(&x, &s.target).unwrap().0, tape.activation_pattern())
}

#[test]
fn reverse_mode_matches_central_differences() {
    let mut cfg = TrainConfig::new(1, 0);
    cfg.t_unroll = 8;
    let h = 1e-5;
    let mut accepted = 0;
    for seed in 0..4u64 {
        let s = sample(10 + seed, 16);
        let bank = FilterBank::random(2, 5, 20 + seed).unwrap();
        let net = CnnParams::init(2, DEFAULT_BOUND, 30 + seed, 1.0, Some(0.2)).unwrap();
        let model = Model::new(MapSource::Network(net), 0.5).unwrap();
        let p = Pipeline::new(&bank, &s.mask, &cfg).unwrap();
        let (x, tape) = p.forward(&s.y, &model).unwrap();
        let (_, g) = mse(&x, &s.target).unwrap();
        let grad = p.backward(&tape, &g).unwrap().to_flat();
        let base = model.to_flat();
        let pattern = tape.activation_pattern();
        if tape.kink_margin() < 1e-6 || tape.relu_margin() < 1e-6 {
            continue;
        }
        accepted += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checked = 0;
        for attempt in 0..40 {
            let v: Vec<f64> = if attempt == 0 {
                let mut e = vec![0.0; base.len()];
                e[0] = 1.0;
                e
            } else {
                let mut d: Vec<f64> = (0..base.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                d[0] = 0.0;
                let n = d.iter().map(|a| a * a).sum::<f64>().sqrt();
                d.iter().map(|a| a / n).collect()
            };
            let shifted = |t: f64| {
                let flat: Vec<f64> = base.iter().zip(&v).map(|(a, b)| a + t * b).collect();
                loss(&p, &s, &model.from_flat(&flat).unwrap())
            };
            let (lp, pp) = shifted(h);
            let (lm, pm) = shifted(-h);
            if pp != pattern || pm != pattern {
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let an: f64 = grad.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!(tk::rel_err(an, fd, 1e-9) <= 1e-3, "seed {seed} attempt {attempt}: {an} vs {fd}");
            checked += 1;
            if checked == 6 {
                break;
            }
        }
        assert!(checked >= 4, "seed {seed}: too few smooth directions");
    }
    assert!(accepted >= 3);
}

#[test]
fn constant_threshold_gradient_matches_central_differences() {
    let mut cfg = TrainConfig::new(1, 0);
    cfg.t_unroll = 8;
    let s = sample(3, 16);
    let bank = FilterBank::random(3, 5, 4).unwrap();
    let model = Model::new(MapSource::constant(0.3), 1.0).unwrap();
    let p = Pipeline::new(&bank, &s.mask, &cfg).unwrap();
    let (x, tape) = p.forward(&s.y, &model).unwrap();
    let grad = p.backward(&tape, &mse(&x, &s.target).unwrap().1).unwrap().to_flat();
    let base = model.to_flat();
    let h = 1e-6;
    for i in 0..2 {
        let at = |t: f64| {
            let mut f = base.clone();
            f[i] += t;
            loss(&p, &s, &model.from_flat(&f).unwrap()).0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!(tk::rel_err(grad[i], fd, 1e-9) <= 1e-3, "parameter {i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let data: Vec<Sample> = (0..4).map(|i| sample(100 + i, 16)).collect();
    let bank = FilterBank::random(2, 5, 7).unwrap();
    let mut cfg = TrainConfig::new(2, 11);
    cfg.t_unroll = 6;
    let model = Model::new(MapSource::constant(0.2), 0.8).unwrap();
    let full = train(&data, &cfg, &bank, model.clone()).unwrap();

    let mut first = Trainer::new(&cfg, &bank, model).unwrap();
    first.run_epoch(&data).unwrap();
    let mut resumed = Trainer::resume(
        &cfg,
        &bank,
        first.model().clone(),
        first.adam().clone(),
        first.epoch(),
        first.history().to_vec(),
    )
    .unwrap();
    resumed.run_epoch(&data).unwrap();
    assert_eq!(resumed.history(), full.history.as_slice());
    assert_eq!(resumed.model(), &full.model);
}

#[test]
fn scalar_training_lowers_the_loss() {
    let data: Vec<Sample> = (0..4).map(|i| sample(200 + i, 16)).collect();
    let bank = FilterBank::random(2, 5, 9).unwrap();
    let mut cfg = TrainConfig::new(4, 1);
    cfg.t_unroll = 8;
    let model = Model::new(MapSource::constant(2.0), 0.1).unwrap();
    let mut t = Trainer::new(&cfg, &bank, model).unwrap();
    let before = t.evaluate_loss(&data).unwrap();
    for _ in 0..4 {
        t.run_epoch(&data).unwrap();
    }
    assert!(t.evaluate_loss(&data).unwrap() < before);
}
