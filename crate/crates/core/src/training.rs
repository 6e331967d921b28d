//! End-to-end reconstruction pipeline, its reverse-mode gradient and the
//! supervised training loop.
//!
//! Forward pass for data `y` and mask `M`:
//!
//! ```text
//! x0 = A^H y
//! x_low = (I + beta grad^T grad)^{-1} x0,   beta = softplus(raw_beta)
//! y' = y - A x_low
//! Lambda = source(x0)
//! s* = FISTA_T(B, y', Lambda)
//! x* = D s* + x_low
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{sigmoid, softplus, softplus_inv};
use crate::error::{invalid, mismatch, Error, Result};
use crate::highpass::{lowpass_record, residual_data, HighpassConfig, LowpassTape, CG_ITERS, CG_TOL};
use crate::image::ComplexImage;
use crate::lambda_maps::{CnnCache, CnnParams, MapSource, LAMBDA_FLOOR};
use crate::operators::{adjoint_a, FeatureMaps, FilterBank, SamplingMask, SynthesisOperator, POWER_ITERS, POWER_TOL};
use crate::solvers::fista::{FistaTape, DEFAULT_MOMENTUM};
use crate::solvers::{fista_record, FistaConfig, LambdaMaps, ProxKind};

/// Fraction of the largest admissible step `1 / ||B||^2`.
pub const STEP_FRACTION: f64 = 0.99;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_net")]
    pub lr_net: f64,
    #[serde(default = "default_lr_scalars")]
    pub lr_scalars: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_unroll")]
    pub t_unroll: usize,
    pub seed: u64,
    #[serde(default = "default_cg_iters")]
    pub cg_iters: usize,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default)]
    pub prox: ProxKind,
}

fn default_batch() -> usize {
    2
}
fn default_lr_net() -> f64 {
    1e-4
}
fn default_lr_scalars() -> f64 {
    1e-1
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_unroll() -> usize {
    64
}
fn default_cg_iters() -> usize {
    CG_ITERS
}
fn default_cg_tol() -> f64 {
    CG_TOL
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: default_batch(),
            lr_net: default_lr_net(),
            lr_scalars: default_lr_scalars(),
            weight_decay: default_weight_decay(),
            t_unroll: default_unroll(),
            seed,
            cg_iters: CG_ITERS,
            cg_tol: CG_TOL,
            prox: ProxKind::Modulus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.t_unroll == 0 || self.cg_iters == 0 {
            return Err(invalid("batch size, unroll depth and CG iterations must be positive"));
        }
        for (name, v) in [("lr_net", self.lr_net), ("lr_scalars", self.lr_scalars)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} {v} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }

    fn highpass(&self, beta: f64) -> HighpassConfig {
        HighpassConfig { beta, cg_iters: self.cg_iters, cg_tol: self.cg_tol }
    }
}

/// Threshold from the unconstrained scalar parameter.
pub fn constant_lambda(raw: f64, bound: f64) -> f64 {
    softplus(raw).clamp(LAMBDA_FLOOR, bound)
}

/// Trainable quantities: the map source and the smoothing weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub source: MapSource,
    pub raw_beta: f64,
}

impl Model {
    pub fn new(source: MapSource, beta: f64) -> Result<Self> {
        source.validate()?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("initial beta {beta} must be positive")));
        }
        Ok(Self { source, raw_beta: softplus_inv(beta) })
    }

    pub fn beta(&self) -> f64 {
        softplus(self.raw_beta)
    }

    /// `[raw_beta, raw_lambda]`, `[raw_beta, network...]` or `[raw_beta]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![self.raw_beta];
        match &self.source {
            MapSource::Constant { lambda, .. } => out.push(softplus_inv(*lambda)),
            MapSource::Heuristic { .. } => {}
            MapSource::Network(p) => out.extend(p.to_flat()),
        }
        out
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        let (&raw_beta, rest) = flat.split_first().ok_or_else(|| mismatch("empty parameter vector"))?;
        let source = match &self.source {
            MapSource::Constant { bound, .. } => {
                let [raw] = rest else { return Err(mismatch("scalar source expects one parameter")) };
                MapSource::Constant { lambda: constant_lambda(*raw, *bound), bound: *bound }
            }
            MapSource::Heuristic { .. } => {
                if !rest.is_empty() {
                    return Err(mismatch("heuristic source has no parameters"));
                }
                self.source.clone()
            }
            MapSource::Network(p) => MapSource::Network(p.from_flat(rest)?),
        };
        Ok(Self { source, raw_beta })
    }

    /// Per-parameter learning rates and decoupled weight-decay coefficients.
    pub fn optimizer_groups(&self, cfg: &TrainConfig) -> (Vec<f64>, Vec<f64>) {
        let mut lr = vec![cfg.lr_scalars];
        let mut wd = vec![0.0];
        match &self.source {
            MapSource::Constant { .. } => {
                lr.push(cfg.lr_scalars);
                wd.push(0.0);
            }
            MapSource::Heuristic { .. } => {}
            MapSource::Network(p) => {
                for is_weight in p.weight_mask() {
                    lr.push(cfg.lr_net);
                    wd.push(if is_weight { cfg.weight_decay } else { 0.0 });
                }
            }
        }
        (lr, wd)
    }
}

/// Gradients mirroring [`Model::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub raw_beta: f64,
    pub raw_lambda: Option<f64>,
    pub network: Option<CnnParams>,
}

impl GradientBundle {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![self.raw_beta];
        out.extend(self.raw_lambda);
        if let Some(n) = &self.network {
            out.extend(n.to_flat());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Operator, step size and solver settings for one sampling mask.
#[derive(Debug, Clone)]
pub struct Pipeline {
    op: SynthesisOperator,
    tau: f64,
    cfg: TrainConfig,
}

#[derive(Debug, Clone)]
enum MapTape {
    Constant { raw: f64, bound: f64 },
    Fixed,
    Network(Box<(CnnParams, CnnCache)>),
}

/// Intermediate state of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    raw_beta: f64,
    lowpass: LowpassTape,
    maps: MapTape,
    fista: FistaTape,
    pub x0: ComplexImage,
    pub x_low: ComplexImage,
    pub lambda: LambdaMaps,
    pub codes: FeatureMaps,
}

impl Tape {
    /// Distance of the closest prox input to its threshold.
    pub fn kink_margin(&self) -> f64 {
        self.fista.kink_margin()
    }

    /// Branch taken at every non-smooth point of the forward pass: prox
    /// inputs above their threshold, then positive ReLU inputs. Two passes
    /// with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = self.fista.active_pattern();
        if let MapTape::Network(c) = &self.maps {
            out.extend(c.1.relu_pattern());
        }
        out
    }

    /// Smallest `|pre-activation|` in the network, infinite without one.
    pub fn relu_margin(&self) -> f64 {
        match &self.maps {
            MapTape::Network(c) => c.1.relu_margin(),
            _ => f64::INFINITY,
        }
    }
}

impl Pipeline {
    pub fn new(d: &FilterBank, m: &SamplingMask, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let op = SynthesisOperator::new(d, m)?;
        let est = op.norm_sq(POWER_ITERS, POWER_TOL)?;
        if !(est.value > 0.0 && est.value.is_finite()) {
            return Err(Error::NonFinite("operator norm estimate".into()));
        }
        Ok(Self { op, tau: STEP_FRACTION / est.value, cfg: cfg.clone() })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mask(&self) -> &SamplingMask {
        self.op.mask()
    }

    pub fn operator(&self) -> &SynthesisOperator {
        &self.op
    }

    pub fn fista_config(&self) -> FistaConfig {
        FistaConfig { iterations: self.cfg.t_unroll, tau: self.tau, momentum_a: DEFAULT_MOMENTUM, prox: self.cfg.prox }
    }

    pub fn forward(&self, y: &ComplexImage, model: &Model) -> Result<(ComplexImage, Tape)> {
        let m = self.op.mask();
        if y.dims() != m.dims() {
            return Err(mismatch(format!("data {:?} vs mask {:?}", y.dims(), m.dims())));
        }
        let x0 = adjoint_a(y, m)?;
        let (split, lowpass) = lowpass_record(&x0, &self.cfg.highpass(model.beta()))?;
        let y_res = residual_data(y, &split.low, m)?;
        let k = self.op.filters();
        let (lambda, maps) = match &model.source {
            MapSource::Network(p) => {
                if p.filters() != k {
                    return Err(mismatch(format!("network emits {} maps, dictionary has {k}", p.filters())));
                }
                let (lam, cache) = p.forward_cached(&x0)?;
                (lam, MapTape::Network(Box::new((p.clone(), cache))))
            }
            MapSource::Constant { lambda, bound } => {
                (model.source.maps(&x0, k)?, MapTape::Constant { raw: softplus_inv(*lambda), bound: *bound })
            }
            MapSource::Heuristic { .. } => (model.source.maps(&x0, k)?, MapTape::Fixed),
        };
        let (h, w) = x0.dims();
        let (codes, fista) = fista_record(&self.op, &y_res, &lambda, &self.fista_config(), &FeatureMaps::zeros(k, h, w))?;
        let x_star = self.op.dictionary().apply(&codes)?.add(&split.low);
        if !x_star.is_finite() {
            return Err(Error::NonFinite("reconstruction".into()));
        }
        let tape = Tape { raw_beta: model.raw_beta, lowpass, maps, fista, x0, x_low: split.low, lambda, codes };
        Ok((x_star, tape))
    }

    pub fn reconstruct(&self, y: &ComplexImage, model: &Model) -> Result<ComplexImage> {
        self.forward(y, model).map(|(x, _)| x)
    }

    /// Gradient of `<x_bar, x*>` with respect to every trainable quantity.
    pub fn backward(&self, tape: &Tape, x_bar: &ComplexImage) -> Result<GradientBundle> {
        let dict = self.op.dictionary();
        let s_bar = dict.adjoint(x_bar)?;
        let fg = tape.fista.backward(&self.op, &s_bar)?;
        let low_bar = x_bar.sub(&adjoint_a(&fg.data, self.op.mask())?);
        let beta_bar = tape.lowpass.beta_gradient(&low_bar);
        let raw_beta = beta_bar * sigmoid(tape.raw_beta);
        let (raw_lambda, network) = match &tape.maps {
            MapTape::Constant { raw, bound } => {
                let v = softplus(*raw);
                let total: f64 = fg.lambda.iter().flatten().sum();
                let g = if v > LAMBDA_FLOOR && v < *bound { total * sigmoid(*raw) } else { 0.0 };
                (Some(g), None)
            }
            MapTape::Fixed => (None, None),
            MapTape::Network(net) => {
                let (p, cache) = net.as_ref();
                (None, Some(p.backward(cache, &fg.lambda)?))
            }
        };
        Ok(GradientBundle { raw_beta, raw_lambda, network })
    }
}

pub fn pipeline_forward(
    y: &ComplexImage,
    m: &SamplingMask,
    d: &FilterBank,
    source: &MapSource,
    raw_beta: f64,
    cfg: &TrainConfig,
) -> Result<(ComplexImage, Tape)> {
    let model = Model { source: source.clone(), raw_beta };
    Pipeline::new(d, m, cfg)?.forward(y, &model)
}

pub fn pipeline_backward(pipeline: &Pipeline, tape: &Tape, loss_grad: &ComplexImage) -> Result<GradientBundle> {
    pipeline.backward(tape, loss_grad)
}

/// Mean squared error over the `2N` real components and its gradient.
pub fn mse(x: &ComplexImage, target: &ComplexImage) -> Result<(f64, ComplexImage)> {
    x.same_dims(target)?;
    let diff = x.sub(target);
    let n = 2.0 * x.len() as f64;
    Ok((diff.norm_sq() / n, diff.scale(2.0 / n)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One Adam step with per-parameter learning rates `lr` and decoupled
/// weight decay `decay` (`p <- p - lr * decay * p - lr * m_hat / (sqrt(v_hat) + eps)`).
pub fn adam_step(params: &[f64], grads: &[f64], state: &AdamState, lr: &[f64], decay: &[f64]) -> Result<(Vec<f64>, AdamState)> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || lr.len() != n || decay.len() != n {
        return Err(mismatch("optimizer inputs differ in length"));
    }
    let step = state.step + 1;
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let mut next = AdamState { step, m: Vec::with_capacity(n), v: Vec::with_capacity(n) };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let m = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        let v = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let update = (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
        out.push(params[i] - lr[i] * decay[i] * params[i] - lr[i] * update);
        next.m.push(m);
        next.v.push(v);
    }
    Ok((out, next))
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub y: ComplexImage,
    pub mask: SamplingMask,
    pub target: ComplexImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Owns the model, the optimizer state and pipelines for each distinct mask.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    bank: FilterBank,
    pipelines: Vec<Pipeline>,
    model: Model,
    adam: AdamState,
    epoch: usize,
    history: Vec<LossRecord>,
}

/// Seed of the shuffle for `epoch`, independent of earlier epochs.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, bank: &FilterBank, model: Model) -> Result<Self> {
        let n = model.to_flat().len();
        Self::resume(cfg, bank, model, AdamState::new(n), 0, Vec::new())
    }

    pub fn resume(cfg: &TrainConfig, bank: &FilterBank, model: Model, adam: AdamState, epoch: usize, history: Vec<LossRecord>) -> Result<Self> {
        cfg.validate()?;
        model.source.validate()?;
        if adam.m.len() != model.to_flat().len() {
            return Err(mismatch("optimizer state does not match the model"));
        }
        Ok(Self { cfg: cfg.clone(), bank: bank.clone(), pipelines: Vec::new(), model, adam, epoch, history })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    fn pipeline_index(&mut self, m: &SamplingMask) -> Result<usize> {
        if let Some(i) = self.pipelines.iter().position(|p| p.mask() == m) {
            return Ok(i);
        }
        self.pipelines.push(Pipeline::new(&self.bank, m, &self.cfg)?);
        Ok(self.pipelines.len() - 1)
    }

    fn prepare(&mut self, data: &[Sample]) -> Result<Vec<usize>> {
        data.iter().map(|s| self.pipeline_index(&s.mask)).collect()
    }

    /// Mean loss and mean gradient over `batch`.
    fn batch_gradient(&self, data: &[Sample], routes: &[usize], batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|&i| {
                let p = &self.pipelines[routes[i]];
                let (x, tape) = p.forward(&data[i].y, &self.model)?;
                let (loss, g) = mse(&x, &data[i].target)?;
                Ok((loss, p.backward(&tape, &g)?.to_flat()))
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; parts[0].1.len()];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        grad.iter_mut().for_each(|v| *v *= scale);
        Ok((loss * scale, grad))
    }

    /// Loss of the current model on `data`, averaged over samples.
    pub fn evaluate_loss(&mut self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(invalid("cannot evaluate on an empty set"));
        }
        let routes = self.prepare(data)?;
        let losses: Vec<f64> = data
            .par_iter()
            .zip(routes.par_iter())
            .map(|(s, &r)| {
                let x = self.pipelines[r].reconstruct(&s.y, &self.model)?;
                Ok(mse(&x, &s.target)?.0)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// One optimizer step on the given sample indices; returns the batch loss.
    pub fn step(&mut self, data: &[Sample], batch: &[usize]) -> Result<f64> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let routes = self.prepare(data)?;
        let (loss, grad) = self.batch_gradient(data, &routes, batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("loss or gradient of batch {batch:?}")));
        }
        let (lr, wd) = self.model.optimizer_groups(&self.cfg);
        let (flat, adam) = adam_step(&self.model.to_flat(), &grad, &self.adam, &lr, &wd)?;
        self.model = self.model.from_flat(&flat)?;
        self.adam = adam;
        Ok(loss)
    }

    /// One pass over `data` in a seeded order; returns the mean batch loss.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(self.cfg.seed, self.epoch)));
        let mut total = 0.0;
        let batches: Vec<Vec<usize>> = order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect();
        for (b, batch) in batches.iter().enumerate() {
            let loss = self.step(data, batch).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!("training loss at epoch {} batch {b}", self.epoch)),
                other => other,
            })?;
            self.history.push(LossRecord { epoch: self.epoch, step: b, loss });
            total += loss;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub epoch_losses: Vec<f64>,
    pub history: Vec<LossRecord>,
}

/// Mini-batch training for `cfg.epochs` epochs.
pub fn train(data: &[Sample], cfg: &TrainConfig, d: &FilterBank, model: Model) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, d, model)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        epoch_losses.push(trainer.run_epoch(data)?);
    }
    Ok(TrainOutcome { model: trainer.model, epoch_losses, history: trainer.history })
}
