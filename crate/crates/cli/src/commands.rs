use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use convsynth::dictionary::cdl_train;
use convsynth::highpass::{lowpass_split, residual_data};
use convsynth::io::{read_bank, write_bank, write_codes, write_complex, write_json, write_lambda_ordered};
use convsynth::lambda_maps::{CnnParams, MapSource};
use convsynth::metrics::evaluate as metric_report;
use convsynth::operators::{adjoint_a, FeatureMaps, FilterBank, SamplingMask};
use convsynth::solvers::fista_solve_with;
use convsynth::training::{Model, Pipeline, Sample, TrainConfig, Trainer};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint, State};
use crate::config::{Loaded, SourceKind, TrainSection};
use crate::dataset::{self, load_split, read_manifest, Manifest};
use crate::error::{config_error, io_context, CliResult};
use crate::png;

fn section<'a, T>(s: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    s.as_ref().ok_or_else(|| config_error(format!("config has no \"{name}\" section")))
}

fn create(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_context(format!("cannot create {}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io_context(format!("cannot write {}", path.display())))
}

fn bank_path(l: &Loaded) -> PathBuf {
    l.resolve(&l.config.paths.dictionary).join("bank.npy")
}

fn load_bank(l: &Loaded) -> CliResult<FilterBank> {
    let path = bank_path(l);
    if !path.exists() {
        return Err(config_error(format!("no filter bank at {}; run pretrain-dict first", path.display())));
    }
    Ok(read_bank(path)?)
}

fn dataset(l: &Loaded) -> CliResult<(PathBuf, Manifest)> {
    let dir = l.resolve(&l.config.paths.dataset);
    let manifest = read_manifest(&dir)?;
    Ok((dir, manifest))
}

pub fn simulate(l: &Loaded, seed: Option<u64>, out: &Path) -> CliResult<String> {
    let mut s = section(&l.config.simulate, "simulate")?.clone();
    if let Some(seed) = seed {
        s.seed = seed;
    }
    create(out)?;
    let m = dataset::simulate(&s, out)?;
    Ok(format!("wrote {}/{}/{} samples to {}", m.train.len(), m.val.len(), m.test.len(), out.display()))
}

#[derive(Serialize)]
struct PretrainReport {
    images: usize,
    lambda: f64,
    seed: u64,
    objective_per_round: Vec<f64>,
}

pub fn pretrain_dict(l: &Loaded, seed: Option<u64>, out: &Path) -> CliResult<String> {
    let p = section(&l.config.pretrain, "pretrain")?;
    let mut cdl = p.cdl.clone();
    if let Some(seed) = seed {
        cdl.seed = seed;
    }
    let (dir, manifest) = dataset(l)?;
    let entries = &manifest.train[..p.images.min(manifest.train.len())];
    if entries.is_empty() {
        return Err(config_error("the training split is empty"));
    }
    let highs = entries
        .par_iter()
        .map(|e| {
            let s = dataset::load_sample(&dir, "train", e)?;
            Ok(lowpass_split(&s.target, &p.highpass)?.high)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let result = cdl_train(&highs, &cdl)?;
    create(out)?;
    write_bank(out.join("bank.npy"), &result.bank)?;
    let mut log = String::from("round,objective\n");
    for (r, v) in result.report.objective_per_round.iter().enumerate() {
        writeln!(log, "{r},{v}").unwrap();
    }
    write_text(&out.join("objective.csv"), &log)?;
    let report = PretrainReport {
        images: highs.len(),
        lambda: result.report.lambda,
        seed: cdl.seed,
        objective_per_round: result.report.objective_per_round.clone(),
    };
    write_json(out.join("report.json"), &report)?;
    let last = result.report.objective_per_round.last().copied().unwrap_or(f64::NAN);
    Ok(format!("learned {} filters from {} images, final objective {last}", result.bank.len(), highs.len()))
}

fn initial_model(t: &TrainSection, bank: &FilterBank, seed: u64, init: Option<&Checkpoint>) -> CliResult<Model> {
    let lambda = match init.map(|c| &c.model.source) {
        Some(MapSource::Constant { lambda, .. }) => *lambda,
        _ => t.init_lambda,
    };
    let source = match t.source {
        SourceKind::Constant => MapSource::Constant { lambda: lambda.min(t.bound), bound: t.bound },
        SourceKind::Heuristic => MapSource::Heuristic { scale: t.heuristic_scale, window: t.heuristic_window, bound: t.bound },
        SourceKind::Network => MapSource::Network(CnnParams::init(bank.len(), t.bound, seed, t.last_gain, Some(lambda))?),
    };
    let mut model = Model::new(source, t.init_beta)?;
    if let Some(c) = init {
        model.raw_beta = c.model.raw_beta;
    }
    Ok(model)
}

fn loss_csv(history: &[convsynth::training::LossRecord]) -> String {
    let mut s = String::from("epoch,step,loss\n");
    for r in history {
        writeln!(s, "{},{},{}", r.epoch, r.step, r.loss).unwrap();
    }
    s
}

fn val_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,val_loss\n");
    for (e, v) in losses.iter().enumerate() {
        writeln!(s, "{e},{v}").unwrap();
    }
    s
}

/// The training section without the fields a resumed run may change.
fn comparable(t: &TrainSection) -> TrainSection {
    let mut t = t.clone();
    t.resume = false;
    t.config.epochs = 0;
    t
}

pub fn train(l: &Loaded, seed: Option<u64>, out: &Path) -> CliResult<String> {
    let mut t = section(&l.config.train, "train")?.clone();
    if let Some(seed) = seed {
        t.config.seed = seed;
    }
    let bank = load_bank(l)?;
    let (dir, manifest) = dataset(l)?;
    let train_set = load_split(&dir, &manifest, "train")?;
    let val_set = load_split(&dir, &manifest, "val")?;
    if train_set.is_empty() {
        return Err(config_error("the training split is empty"));
    }
    let last_dir = out.join("last");
    let (mut trainer, mut state) = if t.resume && last_dir.join("state.json").exists() {
        let c = checkpoint::load(&last_dir)?;
        c.check_bank(&bank)?;
        if comparable(&c.train) != comparable(&t) {
            return Err(config_error(format!("training section differs from the one stored in {}", last_dir.display())));
        }
        (Trainer::resume(&t.config, &bank, c.model, c.adam, c.state.epoch, c.history)?, c.state)
    } else {
        let init = match &t.init_from {
            Some(p) => {
                let c = checkpoint::load(&l.resolve(p))?;
                c.check_bank(&bank)?;
                Some(c)
            }
            None => None,
        };
        let model = initial_model(&t, &bank, t.config.seed, init.as_ref())?;
        let state =
            State { version: 1, epoch: 0, filters: bank.len(), kernel_size: bank.kernel_size(), best_val_loss: None, val_losses: Vec::new() };
        (Trainer::new(&t.config, &bank, model)?, state)
    };
    create(out)?;
    while trainer.epoch() < t.config.epochs {
        trainer.run_epoch(&train_set)?;
        let val = if val_set.is_empty() { trainer.evaluate_loss(&train_set)? } else { trainer.evaluate_loss(&val_set)? };
        state.epoch = trainer.epoch();
        state.val_losses.push(val);
        let improved = state.best_val_loss.is_none_or(|b| val < b);
        if improved {
            state.best_val_loss = Some(val);
        }
        let c = Checkpoint {
            state: state.clone(),
            model: trainer.model().clone(),
            adam: trainer.adam().clone(),
            history: trainer.history().to_vec(),
            train: t.clone(),
        };
        checkpoint::save(&last_dir, &c)?;
        if improved {
            checkpoint::save(&out.join("best"), &c)?;
        }
        write_text(&out.join("loss.csv"), &loss_csv(trainer.history()))?;
        write_text(&out.join("val.csv"), &val_csv(&state.val_losses))?;
    }
    Ok(format!(
        "trained to epoch {} (beta {:.6}, best validation loss {})",
        trainer.epoch(),
        trainer.model().beta(),
        state.best_val_loss.map_or_else(|| "n/a".to_string(), |v| v.to_string())
    ))
}

/// One pipeline per distinct mask, shared by samples that use it.
struct Pipelines<'a> {
    bank: &'a FilterBank,
    cfg: &'a TrainConfig,
    items: Vec<Pipeline>,
}

impl<'a> Pipelines<'a> {
    fn new(bank: &'a FilterBank, cfg: &'a TrainConfig, samples: &[&Sample]) -> CliResult<Self> {
        let mut p = Self { bank, cfg, items: Vec::new() };
        for s in samples {
            p.index(&s.mask)?;
        }
        Ok(p)
    }

    fn index(&mut self, m: &SamplingMask) -> CliResult<usize> {
        if let Some(i) = self.items.iter().position(|p| p.mask() == m) {
            return Ok(i);
        }
        self.items.push(Pipeline::new(self.bank, m, self.cfg)?);
        Ok(self.items.len() - 1)
    }

    fn get(&self, m: &SamplingMask) -> &Pipeline {
        self.items.iter().find(|p| p.mask() == m).expect("pipelines are prepared for every mask")
    }
}

fn magnitude(x: &convsynth::ComplexImage) -> Vec<f64> {
    x.abs().into_values()
}

pub fn reconstruct(l: &Loaded, _seed: Option<u64>, out: &Path) -> CliResult<String> {
    let r = section(&l.config.reconstruct, "reconstruct")?;
    let ckpt_dir = match &r.checkpoint {
        Some(p) => l.resolve(p),
        None => l.resolve(&l.config.paths.checkpoint).join("best"),
    };
    let c = checkpoint::load(&ckpt_dir)?;
    let bank = load_bank(l)?;
    c.check_bank(&bank)?;
    let (dir, manifest) = dataset(l)?;
    let entries = manifest.split(&r.split)?;
    let chosen: Vec<usize> = match &r.samples {
        Some(v) => v.clone(),
        None => (0..entries.len()).collect(),
    };
    if let Some(&bad) = chosen.iter().find(|&&i| i >= entries.len()) {
        return Err(config_error(format!("sample index {bad} out of range for split {} of {}", r.split, entries.len())));
    }
    let samples: Vec<Sample> =
        chosen.par_iter().map(|&i| dataset::load_sample(&dir, &r.split, &entries[i])).collect::<CliResult<_>>()?;
    let cfg = &c.train.config;
    let pipes = Pipelines::new(&bank, cfg, &samples.iter().collect::<Vec<_>>())?;
    create(out)?;
    chosen.par_iter().zip(samples.par_iter()).try_for_each(|(&i, s)| -> CliResult<()> {
        let p = pipes.get(&s.mask);
        let (x, tape) = p.forward(&s.y, &c.model)?;
        let sample_dir = out.join(&entries[i].id);
        create(&sample_dir)?;
        write_complex(sample_dir.join("x_star.npy"), &x)?;
        write_complex(sample_dir.join("x0.npy"), &tape.x0)?;
        write_complex(sample_dir.join("x_low.npy"), &tape.x_low)?;
        let order = tape.lambda.order_by_variance();
        write_lambda_ordered(sample_dir.join("lambda.npy"), &tape.lambda, &order)?;
        write_json(sample_dir.join("lambda_order.json"), &order)?;
        write_codes(sample_dir.join("codes.npy"), &tape.codes)?;
        let y_res = residual_data(&s.y, &tape.x_low, &s.mask)?;
        let (h, w) = x.dims();
        let trace = fista_solve_with(p.operator(), &y_res, &tape.lambda, &p.fista_config(), &FeatureMaps::zeros(bank.len(), h, w), None)?;
        let mut text = String::from("iteration,objective\n");
        for (n, v) in trace.objective_per_iter.iter().enumerate() {
            writeln!(text, "{n},{v}").unwrap();
        }
        write_text(&sample_dir.join("objective.csv"), &text)?;
        if r.png {
            let mut sidecar = png::Sidecar::new();
            png::export(&sample_dir, "x_star.png", &magnitude(&x), h, w, &mut sidecar)?;
            png::export(&sample_dir, "x0.png", &magnitude(&tape.x0), h, w, &mut sidecar)?;
            png::export(&sample_dir, "target.png", &magnitude(&s.target), h, w, &mut sidecar)?;
            for (rank, &k) in order.iter().enumerate() {
                png::export(&sample_dir, &format!("lambda_{rank:02}.png"), tape.lambda.map(k).values(), h, w, &mut sidecar)?;
            }
            write_json(sample_dir.join("png_scaling.json"), &sidecar)?;
        }
        Ok(())
    })?;
    Ok(format!("reconstructed {} samples of split {} into {}", chosen.len(), r.split, out.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub method: String,
    pub sigma: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Population standard deviation.
fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn summarize(rows: &[MetricRow], methods: &[String]) -> String {
    let mut s = String::from("method,sigma,count,psnr_mean,psnr_median,psnr_std,ssim_mean,ssim_median,ssim_std\n");
    for m in methods {
        let mut sigmas: Vec<f64> = rows.iter().filter(|r| &r.method == m).map(|r| r.sigma).collect();
        sigmas.sort_by(f64::total_cmp);
        sigmas.dedup();
        for sigma in sigmas {
            let group: Vec<&MetricRow> = rows.iter().filter(|r| &r.method == m && r.sigma == sigma).collect();
            let p: Vec<f64> = group.iter().map(|r| r.psnr).collect();
            let q: Vec<f64> = group.iter().map(|r| r.ssim).collect();
            writeln!(
                s,
                "{m},{sigma},{},{},{},{},{},{},{}",
                group.len(),
                mean(&p),
                median(&p),
                std_dev(&p),
                mean(&q),
                median(&q),
                std_dev(&q)
            )
            .unwrap();
        }
    }
    s
}

pub fn evaluate(l: &Loaded, _seed: Option<u64>, out: &Path) -> CliResult<String> {
    let e = section(&l.config.evaluate, "evaluate")?;
    let bank = if e.methods.is_empty() { None } else { Some(load_bank(l)?) };
    let mut methods: Vec<(String, Checkpoint)> = Vec::new();
    for (name, path) in &e.methods {
        let c = checkpoint::load(&l.resolve(path))?;
        c.check_bank(bank.as_ref().expect("bank is loaded when methods are listed"))?;
        methods.push((name.clone(), c));
    }
    let (dir, manifest) = dataset(l)?;
    let entries = manifest.split(&e.split)?;
    if entries.is_empty() {
        return Err(config_error(format!("split {} is empty", e.split)));
    }
    let samples = load_split(&dir, &manifest, &e.split)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let pipes = methods
        .iter()
        .map(|(_, c)| Pipelines::new(bank.as_ref().unwrap(), &c.train.config, &refs))
        .collect::<CliResult<Vec<_>>>()?;
    let settings = &l.config.metrics;
    let mut names: Vec<String> = Vec::new();
    if e.zero_filled {
        names.push("zero_filled".into());
    }
    names.extend(methods.iter().map(|(n, _)| n.clone()));
    let rows: Vec<Vec<MetricRow>> = entries
        .par_iter()
        .zip(samples.par_iter())
        .map(|(entry, s)| {
            let mut out = Vec::new();
            let mut push = |method: &str, x: &convsynth::ComplexImage| -> CliResult<()> {
                let m = metric_report(x, &s.target, settings)?;
                out.push(MetricRow { sample_id: entry.id.clone(), method: method.into(), sigma: entry.sigma, psnr: m.psnr, ssim: m.ssim });
                Ok(())
            };
            if e.zero_filled {
                push("zero_filled", &adjoint_a(&s.y, &s.mask)?)?;
            }
            for ((name, c), p) in methods.iter().zip(&pipes) {
                push(name, &p.get(&s.mask).reconstruct(&s.y, &c.model)?)?;
            }
            Ok(out)
        })
        .collect::<CliResult<_>>()?;
    let rows: Vec<MetricRow> = rows.into_iter().flatten().collect();
    let mut csv = String::from("sample_id,method,sigma,psnr,ssim\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.sample_id, r.method, r.sigma, r.psnr, r.ssim).unwrap();
    }
    create(out)?;
    write_text(&out.join("metrics.csv"), &csv)?;
    let summary = summarize(&rows, &names);
    write_text(&out.join("summary.csv"), &summary)?;
    Ok(summary)
}
