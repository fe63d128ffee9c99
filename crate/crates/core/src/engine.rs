//! Two-stage training, per-voxel ancestral sampling, checkpoints and run
//! orchestration.
//!
//! Determinism: every random draw comes from one `ChaCha8Rng`. Within a batch
//! each item receives its own generator seeded from the main stream, items
//! may run in parallel, and gradients are reduced in item order, so results
//! do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::adapter::{self, EnrichmentConfig};
use crate::autograd::Tensor;
use crate::conditioning::{self, CondConfig, ConditionBundle};
use crate::denoiser::{self, AdapterFeatures, HditConfig};
use crate::error::{shape_err, value_err, Error, Result};
use crate::params::{Binder, ParamStore};
use crate::physics::{self, AdcForm, ScheduleMap};
use crate::volume_io::{min_max, DwiStack, Image, TractAtlas, Volume, TRACT_CHANNELS};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PDCK1\n";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Relative tolerance when matching a b-value to a shell.
pub const SHELL_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Denoiser,
    Adapter,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Denoiser => "denoiser",
            Stage::Adapter => "adapter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "denoiser" => Ok(Stage::Denoiser),
            "adapter" => Ok(Stage::Adapter),
            _ => Err(Error::Config(format!("unknown stage {s:?} (expected denoiser or adapter)"))),
        }
    }

    /// Stage 1 trains conditioning and denoiser; stage 2 only the adapter.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Stage::Denoiser => name.starts_with(conditioning::PREFIX) || name.starts_with(denoiser::PREFIX),
            Stage::Adapter => name.starts_with(adapter::PREFIX),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kappa: f64,
    pub delta: f64,
    pub adc_form: AdcForm,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub early_stop_patience: usize,
    /// Every k-th direction of each shell is held out for testing.
    pub holdout_every: usize,
    pub seed: u64,
    pub stage: Stage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: physics::DEFAULT_BETA_START,
            beta_end: physics::DEFAULT_BETA_END,
            kappa: physics::DEFAULT_KAPPA,
            delta: physics::DEFAULT_DELTA,
            adc_form: AdcForm::Sum,
            lr: 5e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.95),
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 80,
            max_steps: 0,
            early_stop_patience: 10,
            holdout_every: 8,
            seed: 0,
            stage: Stage::Denoiser,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("schedule.beta_start", self.beta_start),
            ("schedule.delta", self.delta),
            ("train.lr", self.lr),
            ("train.eps", self.eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.beta_end >= self.beta_start && self.beta_end < 1.0) {
            return Err(Error::Config(format!("schedule.beta_end {} outside [beta_start, 1)", self.beta_end)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("kappa and weight decay must be >= 0".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("adam betas ({b1}, {b2}) must lie in [0, 1)")));
        }
        let counts = [
            ("schedule.steps", self.steps),
            ("train.batch_size", self.batch_size),
            ("train.max_epochs", self.max_epochs),
            ("train.patience", self.early_stop_patience),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.holdout_every < 4 {
            return Err(Error::Config(format!("train.holdout_every must be >= 4, got {}", self.holdout_every)));
        }
        Ok(())
    }
}

/// Everything needed to build the parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hdit: HditConfig,
    pub cond: CondConfig,
    pub adapter: bool,
    pub enrichment: EnrichmentConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hdit: HditConfig::default(), cond: CondConfig::default(), adapter: true, enrichment: EnrichmentConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.hdit.validate()?;
        if self.cond.width != self.hdit.cond_width {
            return Err(Error::Config(format!("cond.width {} != model cond width {}", self.cond.width, self.hdit.cond_width)));
        }
        if self.cond.width == 0 || self.cond.width % 2 != 0 {
            return Err(Error::Config(format!("cond.width must be even and positive, got {}", self.cond.width)));
        }
        Ok(())
    }
}

/// Parameters for `stage`: conditioning + denoiser, plus the adapter in stage 2.
pub fn init_model(cfg: &ModelConfig, stage: Stage, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = conditioning::init_params(&cfg.cond, seed);
    p.merge(denoiser::init_params(&cfg.hdit, seed)?);
    if stage == Stage::Adapter {
        p.merge(adapter::init_params(&cfg.hdit, seed));
    }
    Ok(p)
}

/// Checks that `params` has exactly the names and shapes `cfg` implies.
pub fn check_params(params: &ParamStore, cfg: &ModelConfig, stage: Stage) -> Result<()> {
    let expected = init_model(cfg, stage, 0)?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            None => return Err(Error::Config(format!("parameter {name} missing for this configuration"))),
            Some(p) if p.shape() != t.shape() => {
                return Err(Error::Config(format!("parameter {name} has shape {:?}, configuration expects {:?}", p.shape(), t.shape())))
            }
            _ => {}
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
        return Err(Error::Config(format!("parameter {extra} not part of this configuration")));
    }
    Ok(())
}

// ---------------------------------------------------------------- optimizer

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { lr: cfg.lr, weight_decay: cfg.weight_decay, betas: cfg.betas, eps: cfg.eps }
    }

    /// Decoupled weight decay followed by a bias-corrected Adam step, for
    /// every parameter that has a gradient.
    pub fn update(&self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut OptState) {
        state.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(state.step as i32);
        let c2 = 1.0 - b2.powi(state.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let (m, v) = state.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let decay = 1.0 - self.lr * self.weight_decay;
            for i in 0..g.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p.data[i] = p.data[i] * decay - self.lr * update;
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

// ---------------------------------------------------------------- training

/// One training example: a clean normalized slice and its conditions.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: Image,
    pub bvec: [f64; 3],
    pub bval: f64,
    pub slice_index: usize,
    /// Enriched `(42, H, W)` atlas slice, required in stage 2.
    pub atlas: Option<Vec<f64>>,
}

/// Per-shell schedule maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSet {
    pub maps: Vec<ScheduleMap>,
}

impl ScheduleSet {
    pub fn get(&self, bval: f64) -> Result<&ScheduleMap> {
        self.maps
            .iter()
            .find(|m| (m.shell_bval - bval).abs() <= SHELL_TOLERANCE * m.shell_bval.max(1.0))
            .ok_or_else(|| Error::Config(format!("no schedule for b = {bval}")))
    }

    pub fn steps(&self) -> usize {
        self.maps.first().map_or(0, |m| m.steps())
    }
}

fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Loss (and gradients for the stage's trainable set) of one item at step `t`.
fn item_loss(
    params: &ParamStore,
    model: &ModelConfig,
    stage: Stage,
    item: &TrainItem,
    map: &ScheduleMap,
    t: usize,
    noise: &[f64],
    want_grads: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let cfg = &model.hdit;
    let (h, w) = (item.x0.height, item.x0.width);
    if map.dims[1] != h || map.dims[2] != w {
        return Err(Error::Config(format!("schedule map {:?} does not match slice {h}x{w}", map.dims)));
    }
    let phi = map.phi_slice(t, item.slice_index);
    let x_t = Image::new(h, w, physics::forward_noise(&item.x0.data, &phi, noise)?)?;
    let bundle = ConditionBundle { t, bvec: item.bvec, bval: item.bval, slice_index: item.slice_index };
    let trainable = |name: &str| want_grads && stage.trains(name);
    let mut b = Binder::with_trainable(params, &trainable);
    let feats = match stage {
        Stage::Adapter => {
            let atlas = item.atlas.as_deref().ok_or_else(|| Error::Config("stage 2 requires an atlas slice".into()))?;
            Some(adapter::adapter_forward_graph(&mut b, cfg, atlas)?)
        }
        Stage::Denoiser => None,
    };
    let pred = denoiser::predict_noise_graph(&mut b, cfg, &model.cond, &x_t, &bundle, feats.as_ref())?;
    let target = denoiser::patchify(noise, 1, h, w, cfg.patch_size)?;
    let loss = b.graph.mse(pred, target.data);
    let value = b.graph.value(loss).data[0];
    let grads = if want_grads && value.is_finite() { b.gradients(loss) } else { BTreeMap::new() };
    Ok((value, grads))
}

/// One optimizer step on `batch`; returns the batch-mean loss.
///
/// Each item draws `t` uniformly from `1..=T` and standard-normal noise,
/// forms `x_t` under its shell's per-voxel schedule and regresses the noise.
pub fn training_step(
    params: &mut ParamStore,
    model: &ModelConfig,
    stage: Stage,
    batch: &[TrainItem],
    schedules: &ScheduleSet,
    opt: &AdamW,
    state: &mut OptState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return value_err("empty batch");
    }
    let steps = schedules.steps();
    let draws: Vec<(usize, u64)> = batch.iter().map(|_| (rng.random_range(1..=steps), rng.next_u64())).collect();
    let snapshot: &ParamStore = params;
    let results = batch
        .par_iter()
        .zip(&draws)
        .map(|(item, &(t, seed))| {
            let map = schedules.get(item.bval)?;
            let mut item_rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = standard_normal(&mut item_rng, item.x0.data.len());
            item_loss(snapshot, model, stage, item, map, t, &noise, true)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = batch.len() as f64;
    let loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
    if !loss.is_finite() {
        let bad: Vec<usize> = results.iter().enumerate().filter(|(_, (l, _))| !l.is_finite()).map(|(i, _)| i).collect();
        return Err(Error::Divergence(format!(
            "non-finite loss {loss} at optimizer step {} (items {bad:?}, t = {:?})",
            state.step + 1,
            bad.iter().map(|&i| draws[i].0).collect::<Vec<_>>()
        )));
    }
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for (_, grads) in results {
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    for g in total.values_mut() {
        g.data.iter_mut().for_each(|v| *v /= n);
    }
    opt.update(params, &total, state);
    Ok(loss)
}

/// Mean loss over `items` with `t` and noise drawn from a generator seeded by `seed`.
pub fn evaluation_loss(
    params: &ParamStore,
    model: &ModelConfig,
    stage: Stage,
    items: &[TrainItem],
    schedules: &ScheduleSet,
    seed: u64,
) -> Result<f64> {
    if items.is_empty() {
        return value_err("no evaluation items");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = schedules.steps();
    let draws: Vec<(usize, u64)> = items.iter().map(|_| (rng.random_range(1..=steps), rng.next_u64())).collect();
    let losses = items
        .par_iter()
        .zip(&draws)
        .map(|(item, &(t, s))| {
            let noise = standard_normal(&mut ChaCha8Rng::seed_from_u64(s), item.x0.data.len());
            Ok(item_loss(params, model, stage, item, schedules.get(item.bval)?, t, &noise, false)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / items.len() as f64)
}

/// Stops when the monitored value has not strictly improved for `patience`
/// consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records one epoch; returns `(improved, should_stop)`.
    pub fn update(&mut self, value: f64) -> (bool, bool) {
        if value < self.best {
            self.best = value;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

// ---------------------------------------------------------------- sampling

/// One ancestral step with per-voxel `phi_t` and `phi_{t-1}`.
pub fn reverse_step_values(x_t: &[f64], eps_hat: &[f64], phi_t: &[f64], phi_prev: &[f64], z: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = x_t.len();
    if eps_hat.len() != n || phi_t.len() != n || phi_prev.len() != n || z.is_some_and(|z| z.len() != n) {
        return shape_err("reverse_step: length mismatch");
    }
    Ok((0..n)
        .map(|i| {
            let (ab, ab_prev) = (phi_t[i], phi_prev[i]);
            let alpha = ab / ab_prev;
            let mean = (x_t[i] - ((1.0 - alpha) / (1.0 - ab).sqrt()) * eps_hat[i]) / alpha.sqrt();
            match z {
                Some(z) => {
                    let var = ((1.0 - ab_prev) / (1.0 - ab)) * (1.0 - alpha);
                    mean + var.sqrt() * z[i]
                }
                None => mean,
            }
        })
        .collect())
}

fn check_t(t: usize, steps: usize) -> Result<()> {
    if t == 0 || t > steps {
        return value_err(format!("t = {t} outside 1..={steps}"));
    }
    Ok(())
}

/// Reverse step for one slice of `map`; `z = None` means zero noise.
pub fn reverse_step(x_t: &Image, eps_hat: &Image, t: usize, map: &ScheduleMap, slice: usize, z: Option<&Image>) -> Result<Image> {
    check_t(t, map.steps())?;
    if map.dims[1] != x_t.height || map.dims[2] != x_t.width || slice >= map.dims[0] {
        return Err(Error::Config(format!("schedule map {:?} does not match slice {slice} of {}x{}", map.dims, x_t.height, x_t.width)));
    }
    let out = reverse_step_values(
        &x_t.data,
        &eps_hat.data,
        &map.phi_slice(t, slice),
        &map.phi_slice(t - 1, slice),
        z.map(|z| z.data.as_slice()),
    )?;
    Image::new(x_t.height, x_t.width, out)
}

/// Standard scalar-schedule DDPM step, with `α_t = ᾱ_t / ᾱ_{t−1}`.
pub fn ddpm_reverse_step(x_t: &Image, eps_hat: &Image, t: usize, base: &physics::NoiseScheduleBase, z: Option<&Image>) -> Result<Image> {
    check_t(t, base.steps())?;
    let n = x_t.data.len();
    let out = reverse_step_values(
        &x_t.data,
        &eps_hat.data,
        &vec![base.alpha_bar(t); n],
        &vec![base.alpha_bar(t - 1); n],
        z.map(|z| z.data.as_slice()),
    )?;
    Image::new(x_t.height, x_t.width, out)
}

/// Sampler switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Draw fresh `z` at every step; `false` gives the deterministic rollout.
    pub stochastic: bool,
    /// Clamp the implied clean image `x̂₀` to `[-1, 1]` before each step.
    pub clip_x0: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { stochastic: true, clip_x0: true }
    }
}

/// Replaces `eps_hat` by the noise consistent with a clamped `x̂₀`. Leaves
/// `eps_hat` untouched wherever `x̂₀` already lies in `[-1, 1]`.
pub fn clip_eps(x_t: &[f64], eps_hat: &mut [f64], phi_t: &[f64]) {
    for i in 0..x_t.len() {
        let (a, s) = (phi_t[i].sqrt(), (1.0 - phi_t[i]).sqrt());
        let x0 = (x_t[i] - s * eps_hat[i]) / a;
        if !(-1.0..=1.0).contains(&x0) {
            eps_hat[i] = (x_t[i] - a * x0.clamp(-1.0, 1.0)) / s;
        }
    }
}

/// Ancestral sampling with an arbitrary noise predictor `eps(x_t, t)`.
/// Output is clamped to `[-1, 1]`.
pub fn sample_with<F>(map: &ScheduleMap, slice: usize, opts: SamplerOptions, rng: &mut ChaCha8Rng, eps: F) -> Result<Image>
where
    F: Fn(&Image, usize) -> Result<Image>,
{
    let [zs, h, w] = map.dims;
    if slice >= zs {
        return Err(Error::Config(format!("slice {slice} outside schedule map with {zs} slices")));
    }
    let stochastic = opts.stochastic;
    let mut x = Image::new(h, w, standard_normal(rng, h * w))?;
    for t in (1..=map.steps()).rev() {
        let mut e = eps(&x, t)?;
        if opts.clip_x0 {
            clip_eps(&x.data, &mut e.data, &map.phi_slice(t, slice));
        }
        let z = if stochastic && t > 1 { Some(Image::new(h, w, standard_normal(rng, h * w))?) } else { None };
        x = reverse_step(&x, &e, t, map, slice, z.as_ref())?;
    }
    x.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(x)
}

/// What to synthesize: conditions for one slice (the `t` field is ignored).
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub bvec: [f64; 3],
    pub bval: f64,
    pub slice_index: usize,
    pub atlas: Option<Vec<f64>>,
}

/// Draws one slice with the trained network. Adapter features are used when
/// the request carries an atlas slice and the parameters include the adapter.
pub fn sample(
    params: &ParamStore,
    model: &ModelConfig,
    req: &SampleRequest,
    map: &ScheduleMap,
    opts: SamplerOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let cfg = &model.hdit;
    if map.dims[1] != cfg.image_height || map.dims[2] != cfg.image_width {
        return Err(Error::Config(format!("schedule map {:?} does not match model {}x{}", map.dims, cfg.image_height, cfg.image_width)));
    }
    let feats: Option<AdapterFeatures> = match (&req.atlas, params.contains("adp.stem.w")) {
        (Some(a), true) => Some(adapter::adapter_forward(params, cfg, a)?),
        _ => None,
    };
    sample_with(map, req.slice_index, opts, rng, |x, t| {
        let bundle = ConditionBundle { t, bvec: req.bvec, bval: req.bval, slice_index: req.slice_index };
        denoiser::predict_noise(params, cfg, &model.cond, x, &bundle, feats.as_ref())
    })
}

/// Samples every request in parallel; request `i` uses stream `i + 1` of a
/// generator seeded with `seed`.
pub fn sample_many(
    params: &ParamStore,
    model: &ModelConfig,
    reqs: &[SampleRequest],
    schedules: &ScheduleSet,
    opts: SamplerOptions,
    seed: u64,
) -> Result<Vec<Image>> {
    reqs.par_iter()
        .enumerate()
        .map(|(i, req)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            sample(params, model, req, schedules.get(req.bval)?, opts, &mut rng)
        })
        .collect()
}

// ---------------------------------------------------------------- checkpoints

/// Serializable generator position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub rng: RngState,
    /// Global intensity range mapped to `[-1, 1]` during training.
    pub norm: (f64, f64),
    /// Run configuration snapshot as ordered `key = value` pairs.
    pub config: Vec<(String, String)>,
    pub params: ParamStore,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut header = String::new();
    let _ = writeln!(header, "stage {}", ck.stage.tag());
    let _ = writeln!(header, "step {}", ck.step);
    let _ = writeln!(header, "rng {} {} {}", hex(&ck.rng.seed), ck.rng.stream, ck.rng.word_pos);
    let _ = writeln!(header, "norm {:016x} {:016x}", ck.norm.0.to_bits(), ck.norm.1.to_bits());
    for (k, v) in &ck.config {
        let _ = writeln!(header, "config {k} = {v}");
    }
    for (name, t) in ck.params.iter() {
        let _ = writeln!(header, "param {name} {} {} f64", t.rows, t.cols);
    }
    let mut out = Vec::with_capacity(header.len() + 8 * ck.params.numel() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, t) in ck.params.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 18 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let hlen = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
    let header = bytes.get(18..18 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| fmt("header is not UTF-8"))?;
    let mut payload = &bytes[18 + hlen..];

    let (mut stage, mut step, mut rng, mut norm) = (None, None, None, None);
    let mut config = Vec::new();
    let mut manifest = Vec::new();
    for line in header.lines() {
        let (key, rest) = line.split_once(' ').ok_or_else(|| fmt(&format!("bad header line {line:?}")))?;
        match key {
            "stage" => stage = Some(Stage::parse(rest).map_err(|_| fmt(&format!("unknown stage {rest:?}")))?),
            "step" => step = Some(rest.parse::<u64>().map_err(|_| fmt("bad step"))?),
            "rng" => {
                let parts: Vec<&str> = rest.split(' ').collect();
                let seed = parts.first().and_then(|s| unhex(s)).filter(|s| s.len() == 32).ok_or_else(|| fmt("bad rng seed"))?;
                let stream = parts.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| fmt("bad rng stream"))?;
                let word_pos = parts.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| fmt("bad rng position"))?;
                rng = Some(RngState { seed: seed.try_into().unwrap(), stream, word_pos });
            }
            "norm" => {
                let v: Vec<f64> = rest.split(' ').filter_map(|s| u64::from_str_radix(s, 16).ok()).map(f64::from_bits).collect();
                if v.len() != 2 {
                    return Err(fmt("bad norm"));
                }
                norm = Some((v[0], v[1]));
            }
            "config" => {
                let (k, v) = rest.split_once(" = ").ok_or_else(|| fmt(&format!("bad config line {rest:?}")))?;
                config.push((k.to_string(), v.to_string()));
            }
            "param" => {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 4 || parts[3] != "f64" {
                    return Err(fmt(&format!("bad manifest entry {rest:?}")));
                }
                let rows: usize = parts[1].parse().map_err(|_| fmt("bad rows"))?;
                let cols: usize = parts[2].parse().map_err(|_| fmt("bad cols"))?;
                manifest.push((parts[0].to_string(), rows, cols));
            }
            _ => return Err(fmt(&format!("unknown header key {key:?}"))),
        }
    }
    let mut params = ParamStore::new();
    for (name, rows, cols) in manifest {
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| fmt("manifest overflow"))?;
        if payload.len() < n {
            return Err(fmt(&format!("payload too short for {name}")));
        }
        let data = payload[..n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        payload = &payload[n..];
        params.insert(name, Tensor::new(rows, cols, data));
    }
    if !payload.is_empty() {
        return Err(fmt(&format!("{} trailing payload bytes not described by the manifest", payload.len())));
    }
    Ok(Checkpoint {
        stage: stage.ok_or_else(|| fmt("missing stage"))?,
        step: step.ok_or_else(|| fmt("missing step"))?,
        rng: rng.ok_or_else(|| fmt("missing rng"))?,
        norm: norm.ok_or_else(|| fmt("missing norm"))?,
        config,
        params,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and verifies it against `cfg`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    check_params(&ck.params, cfg, ck.stage)?;
    Ok(ck)
}

// ---------------------------------------------------------------- data

/// Normalized training data with direction splits and per-shell schedules.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `(Z, H, W)`.
    pub dims: [usize; 3],
    pub norm: (f64, f64),
    /// Normalized `(D, Z, H, W)` volume.
    pub volume: Volume,
    pub stack: DwiStack,
    pub train_dirs: Vec<usize>,
    pub val_dirs: Vec<usize>,
    pub test_dirs: Vec<usize>,
    /// Mean raw b=0 volume, `(1, Z, H, W)`.
    pub b0: Volume,
    /// Enriched atlas, when one was supplied.
    pub atlas: Option<TractAtlas>,
    pub schedules: ScheduleSet,
}

/// Splits one shell's directions: index `i % k == k − 1` is test,
/// `i % k == k/2 − 1` is validation, the rest train.
pub fn split_directions(dirs: &[usize], k: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &d) in dirs.iter().enumerate() {
        if i % k == k - 1 {
            test.push(d);
        } else if i % k == k / 2 - 1 {
            val.push(d);
        } else {
            train.push(d);
        }
    }
    (train, val, test)
}

impl Dataset {
    pub fn new(stack: &DwiStack, atlas: Option<&TractAtlas>, model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let [_, z, h, w] = stack.volume.dims();
        if h != model.hdit.image_height || w != model.hdit.image_width {
            return Err(Error::Config(format!(
                "data slices are {h}x{w} but the model is configured for {}x{}",
                model.hdit.image_height, model.hdit.image_width
            )));
        }
        if z > model.cond.max_slices {
            return Err(Error::Config(format!("{z} slices exceed cond.max_slices = {}", model.cond.max_slices)));
        }
        let b0_dirs: Vec<usize> = stack.gradients.entries.iter().enumerate().filter(|(_, g)| g.is_b0()).map(|(i, _)| i).collect();
        if b0_dirs.is_empty() {
            return Err(Error::Config("data has no b=0 volume".into()));
        }
        let plane = z * h * w;
        let mut b0 = vec![0.0; plane];
        for &d in &b0_dirs {
            let src = &stack.volume.data()[d * plane..(d + 1) * plane];
            b0.iter_mut().zip(src).for_each(|(a, s)| *a += s / b0_dirs.len() as f64);
        }
        let b0 = Volume::new([1, z, h, w], b0)?;

        let base = physics::build_base_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        let (mut train_dirs, mut val_dirs, mut test_dirs) = (Vec::new(), Vec::new(), Vec::new());
        let mut maps = Vec::new();
        for shell in stack.gradients.shells() {
            let dirs = physics::shell_directions(stack, shell);
            let (tr, va, te) = split_directions(&dirs, cfg.holdout_every);
            if tr.is_empty() {
                return Err(Error::Config(format!("shell b={shell} keeps no training directions")));
            }
            let adc = physics::estimate_adc_atlas_from(stack, shell, &tr, cfg.adc_form)?;
            maps.push(physics::build_schedule_map(&adc, &base, cfg.kappa, cfg.delta)?);
            train_dirs.extend(tr);
            val_dirs.extend(va);
            test_dirs.extend(te);
        }

        let (lo, hi) = min_max(stack.volume.data());
        let range = if hi > lo { hi - lo } else { 1.0 };
        let normalized = stack.volume.data().iter().map(|v| 2.0 * (v - lo) / range - 1.0).collect();
        let volume = Volume::new(stack.volume.dims(), normalized)?;

        let atlas = match atlas {
            Some(a) => {
                let ad = a.volume.dims();
                if ad != [TRACT_CHANNELS, z, h, w] {
                    return Err(Error::Config(format!("atlas dims {ad:?} do not match data {z}x{h}x{w}")));
                }
                Some(adapter::enrich_empty_slices(a, &b0, &model.enrichment)?)
            }
            None => None,
        };
        Ok(Self {
            dims: [z, h, w],
            norm: (lo, hi),
            volume,
            stack: stack.clone(),
            train_dirs,
            val_dirs,
            test_dirs,
            b0,
            atlas,
            schedules: ScheduleSet { maps },
        })
    }

    pub fn image(&self, dir: usize, z: usize) -> Image {
        self.volume.image(dir, z)
    }

    /// Maps a `[-1, 1]` image back to raw intensities.
    pub fn denormalize(&self, img: &Image) -> Image {
        let (lo, hi) = self.norm;
        let range = if hi > lo { hi - lo } else { 1.0 };
        Image { height: img.height, width: img.width, data: img.data.iter().map(|v| (v + 1.0) / 2.0 * range + lo).collect() }
    }

    pub fn atlas_slice(&self, z: usize) -> Option<Vec<f64>> {
        self.atlas.as_ref().map(|a| (0..TRACT_CHANNELS).flat_map(|c| a.volume.image(c, z).data).collect())
    }

    pub fn item(&self, dir: usize, z: usize, with_atlas: bool) -> TrainItem {
        let g = &self.stack.gradients.entries[dir];
        TrainItem {
            x0: self.image(dir, z),
            bvec: g.bvec,
            bval: g.bval,
            slice_index: z,
            atlas: if with_atlas { self.atlas_slice(z) } else { None },
        }
    }

    pub fn items(&self, dirs: &[usize], with_atlas: bool) -> Vec<TrainItem> {
        dirs.iter().flat_map(|&d| (0..self.dims[0]).map(move |z| (d, z))).map(|(d, z)| self.item(d, z, with_atlas)).collect()
    }
}

// ---------------------------------------------------------------- run loop

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub epochs: usize,
    pub stopped_early: bool,
    pub best_epoch: usize,
}

/// Trains for up to `max_epochs` (or `max_steps`) with early stopping on the
/// validation loss; on return `params` holds the best-validation weights.
pub fn train(
    params: &mut ParamStore,
    model: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    state: &mut OptState,
    on_step: &mut dyn FnMut(u64, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    let stage = cfg.stage;
    let with_atlas = stage == Stage::Adapter;
    if with_atlas && data.atlas.is_none() {
        return Err(Error::Config("adapter stage needs a tract atlas".into()));
    }
    check_params(params, model, stage)?;
    let train_items = data.items(&data.train_dirs, with_atlas);
    let val_items = data.items(&data.val_dirs, with_atlas);
    let val_seed = cfg.seed ^ 0x5eed_0f_7a11;
    let opt = AdamW::from_config(cfg);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut report = TrainReport::default();
    let mut best = params.clone();
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && report.losses.len() >= cfg.max_steps {
                break;
            }
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| train_items[i].clone()).collect();
            let loss = training_step(params, model, stage, &batch, &data.schedules, &opt, state, rng)?;
            report.losses.push(loss);
            on_step(state.step, loss);
        }
        report.epochs = epoch + 1;
        let val = if val_items.is_empty() { *report.losses.last().unwrap_or(&f64::INFINITY) } else { evaluation_loss(params, model, stage, &val_items, &data.schedules, val_seed)? };
        report.val_losses.push(val);
        let (improved, stop) = stopper.update(val);
        if improved {
            best = params.clone();
            report.best_epoch = epoch + 1;
        }
        if stop {
            report.stopped_early = true;
            break 'epochs;
        }
        if cfg.max_steps > 0 && report.losses.len() >= cfg.max_steps {
            break;
        }
    }
    *params = best;
    Ok(report)
}

/// Moving average with window `w` (shorter at the start).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{self, PhantomSpec};

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            hdit: HditConfig {
                image_height: 16,
                image_width: 16,
                patch_size: 2,
                widths: [8, 16, 32],
                blocks_per_level: 1,
                bottleneck_blocks: 1,
                na_window: 3,
                head_dim: 8,
                cond_width: 8,
            },
            cond: CondConfig { width: 8, ffn_blocks: 1, max_slices: 4 },
            adapter: true,
            enrichment: EnrichmentConfig::default(),
        }
    }

    fn tiny_data(model: &ModelConfig, cfg: &TrainConfig) -> Dataset {
        let spec = PhantomSpec { slices: 2, height: 16, width: 16, n_tracts: 1, dirs_per_shell: 8, ..PhantomSpec::default() };
        let ph = phantom::generate(&spec).unwrap();
        Dataset::new(&ph.stack, Some(&ph.atlas), model, cfg).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { steps: 16, beta_start: 1e-3, beta_end: 0.2, batch_size: 4, holdout_every: 4, ..TrainConfig::default() }
    }

    #[test]
    fn adamw_matches_hand_computation() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(1, 2, vec![1.0, -2.0]));
        let opt = AdamW { lr: 0.1, weight_decay: 0.01, betas: (0.9, 0.999), eps: 1e-8 };
        let mut st = OptState::default();
        let g: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::new(1, 2, vec![0.5, -0.25]))].into();
        opt.update(&mut p, &g, &mut st);
        // first step: m̂ = g, v̂ = g², update = sign(g) (up to eps)
        let w = &p.get("w").unwrap().data;
        let exp0 = 1.0 * (1.0 - 0.001) - 0.1 * 0.5 / (0.5 + 1e-8);
        let exp1 = -2.0 * (1.0 - 0.001) + 0.1 * 0.25 / (0.25 + 1e-8);
        assert!((w[0] - exp0).abs() < 1e-12 && (w[1] - exp1).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn early_stopping_counts_exactly() {
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.update(1.0), (true, false));
        assert_eq!(s.update(1.0), (false, false));
        assert_eq!(s.update(0.5), (true, false));
        assert_eq!(s.update(0.7), (false, false));
        assert_eq!(s.update(0.6), (false, true));
        let mut s = EarlyStopping::new(1);
        s.update(1.0);
        assert_eq!(s.update(2.0), (false, true));
    }

    #[test]
    fn reverse_step_t1_is_deterministic() {
        let base = physics::build_base_schedule(8, 1e-3, 0.1).unwrap();
        let map = ScheduleMap::uniform(base, [1, 2, 2]);
        let x = Image::new(2, 2, vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let e = Image::new(2, 2, vec![0.5, 0.5, -0.5, 0.0]).unwrap();
        let z = Image::filled(2, 2, 3.0);
        let a = reverse_step(&x, &e, 1, &map, 0, Some(&z)).unwrap();
        let b = reverse_step(&x, &e, 1, &map, 0, None).unwrap();
        assert_eq!(a, b);
        assert!(matches!(reverse_step(&x, &e, 0, &map, 0, None), Err(Error::Value(_))));
        assert!(matches!(reverse_step(&x, &e, 9, &map, 0, None), Err(Error::Value(_))));
    }

    #[test]
    fn point_mass_rollout_recovers_x0() {
        let base = physics::build_base_schedule(64, 1.5625e-3, 0.3125).unwrap();
        let dims = [1, 4, 4];
        let atlas = physics::AdcAtlas { values: (0..16).map(|i| 1e-3 * (1.0 + i as f64 / 8.0)).collect(), dims, shell_bval: 1000.0, n_directions: 1 };
        let map = physics::build_schedule_map(&atlas, &base, 1.0, 1e-8).unwrap();
        let x0: Vec<f64> = (0..16).map(|i| (i as f64 / 8.0) - 1.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = SamplerOptions { stochastic: false, clip_x0: false };
        let out = sample_with(&map, 0, opts, &mut rng, |x, t| {
            let phi = map.phi_slice(t, 0);
            Image::new(4, 4, (0..16).map(|i| (x.data[i] - phi[i].sqrt() * x0[i]) / (1.0 - phi[i]).sqrt()).collect())
        })
        .unwrap();
        for (a, b) in out.data.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_predictor_loss_is_unit_variance() {
        let model = tiny_model();
        let cfg = tiny_cfg();
        let data = tiny_data(&model, &cfg);
        let mut params = init_model(&model, Stage::Denoiser, 0).unwrap();
        params.iter_mut().filter(|(n, _)| n.starts_with("den.out")).for_each(|(_, t)| t.data.iter_mut().for_each(|v| *v = 0.0));
        // independent (t, noise) draws per copy
        let items: Vec<TrainItem> = (0..4).flat_map(|_| data.items(&data.train_dirs, false)).collect();
        let loss = evaluation_loss(&params, &model, Stage::Denoiser, &items, &data.schedules, 3).unwrap();
        assert!(items.len() * 256 >= 10_000);
        assert!((loss - 1.0).abs() < 0.05, "{loss}");
    }

    #[test]
    fn training_step_is_deterministic_and_stage2_freezes() {
        let model = tiny_model();
        let cfg = tiny_cfg();
        let data = tiny_data(&model, &cfg);
        let opt = AdamW::from_config(&cfg);
        let batch = data.items(&data.train_dirs[..2], true);
        let run = |stage: Stage| {
            let mut p = init_model(&model, stage, 1).unwrap();
            let mut st = OptState::default();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let l = training_step(&mut p, &model, stage, &batch, &data.schedules, &opt, &mut st, &mut rng).unwrap();
            (l, p)
        };
        let (l1, p1) = run(Stage::Denoiser);
        let (l2, p2) = run(Stage::Denoiser);
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(p1, p2);
        assert!(l1 >= 0.0);

        let before = init_model(&model, Stage::Adapter, 1).unwrap();
        let (_, after) = run(Stage::Adapter);
        for (name, t) in before.iter() {
            let u = after.get(name).unwrap();
            if name.starts_with("adp.") {
                continue;
            }
            assert!(t.data.iter().zip(&u.data).all(|(a, b)| a.to_bits() == b.to_bits()), "{name} changed");
        }
        assert!(before.iter().any(|(n, t)| n.starts_with("adp.") && after.get(n).unwrap() != t));
    }

    #[test]
    fn divergence_is_reported() {
        let model = tiny_model();
        let cfg = tiny_cfg();
        let data = tiny_data(&model, &cfg);
        let mut p = init_model(&model, Stage::Denoiser, 0).unwrap();
        p.get_mut("den.out.b").unwrap().data[0] = f64::NAN;
        let mut st = OptState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = data.items(&data.train_dirs[..1], false);
        let r = training_step(&mut p, &model, Stage::Denoiser, &batch, &data.schedules, &AdamW::from_config(&cfg), &mut st, &mut rng);
        assert!(matches!(r, Err(Error::Divergence(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny_model();
        let params = init_model(&model, Stage::Denoiser, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.next_u64();
        let ck = Checkpoint {
            stage: Stage::Denoiser,
            step: 12,
            rng: RngState::capture(&rng),
            norm: (0.0, 1.0 / 3.0),
            config: vec![("seed".into(), "4".into()), ("model.widths".into(), "8,16,32".into())],
            params,
        };
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.rng.restore().next_u64(), rng.next_u64());

        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Version { expected: 1, found: 9 })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Format(_))));

        let mut other = tiny_model();
        other.hdit.widths = [8, 16, 24];
        assert!(matches!(check_params(&back.params, &other, Stage::Denoiser), Err(Error::Config(_))));
        assert!(check_params(&back.params, &model, Stage::Denoiser).is_ok());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let dirs: Vec<usize> = (1..=16).collect();
        let (tr, va, te) = split_directions(&dirs, 8);
        assert_eq!(te, vec![8, 16]);
        assert_eq!(va, vec![4, 12]);
        assert_eq!(tr.len() + va.len() + te.len(), 16);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
