//! Flat `key = value` run configuration.
//!
//! Every key has a documented default; unknown keys are rejected. Lines
//! starting with `#` (and trailing `# ...` comments) are ignored.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapter::EnrichmentConfig;
use crate::conditioning::CondConfig;
use crate::denoiser::HditConfig;
use crate::engine::{ModelConfig, SamplerOptions, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::phantom::PhantomSpec;
use crate::physics::AdcForm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    IntList,
    FloatList,
    Choice(&'static [&'static str]),
}

/// `(key, default, kind, description)`.
const KEYS: &[(&str, &str, Kind, &str)] = &[
    ("seed", "0", Kind::Int, "master seed for initialization, batching, noise and sampling"),
    ("phantom.slices", "16", Kind::Int, "number of axial slices"),
    ("phantom.height", "64", Kind::Int, "slice height in voxels"),
    ("phantom.width", "64", Kind::Int, "slice width in voxels"),
    ("phantom.tracts", "3", Kind::Int, "number of synthetic fiber tracts (<= 42)"),
    ("phantom.shells", "1000,2000", Kind::FloatList, "b-values of the diffusion shells (s/mm^2)"),
    ("phantom.dirs_per_shell", "16", Kind::Int, "gradient directions per shell"),
    ("phantom.noise_sigma", "0", Kind::Float, "Rician noise level (0 = noiseless)"),
    ("cond.width", "256", Kind::Int, "width of the guidance vector"),
    ("cond.ffn_blocks", "2", Kind::Int, "residual GEGLU blocks after the embedding sum"),
    ("cond.max_slices", "16", Kind::Int, "size of the slice-index embedding table"),
    ("model.image_height", "64", Kind::Int, "input slice height"),
    ("model.image_width", "64", Kind::Int, "input slice width"),
    ("model.patch_size", "4", Kind::Int, "patch size of the stem (and adapter unshuffle factor)"),
    ("model.widths", "64,128,256", Kind::IntList, "channel width of the three levels"),
    ("model.blocks", "1", Kind::Int, "transformer blocks per level, encoder and decoder each"),
    ("model.bottleneck_blocks", "2", Kind::Int, "global-attention blocks at the bottleneck"),
    ("model.na_window", "7", Kind::Int, "neighborhood attention window (odd)"),
    ("model.head_dim", "32", Kind::Int, "attention head dimension"),
    ("adapter.enabled", "true", Kind::Bool, "use the tract adapter when an atlas is available"),
    ("adapter.xi", "1.0", Kind::Float, "enrichment constant for empty atlas slices"),
    ("schedule.steps", "1000", Kind::Int, "diffusion steps T"),
    ("schedule.beta_start", "1e-4", Kind::Float, "first beta of the linear schedule"),
    ("schedule.beta_end", "0.02", Kind::Float, "last beta of the linear schedule"),
    ("schedule.kappa", "0.5", Kind::Float, "strength of the ADC-dependent exponent"),
    ("schedule.delta", "1e-8", Kind::Float, "min-max degeneracy threshold"),
    ("schedule.adc_form", "sum", Kind::Choice(&["sum", "mean"]), "ADC aggregation across directions"),
    ("train.stage", "denoiser", Kind::Choice(&["denoiser", "adapter"]), "training stage"),
    ("train.lr", "5e-4", Kind::Float, "AdamW learning rate"),
    ("train.weight_decay", "1e-4", Kind::Float, "AdamW decoupled weight decay"),
    ("train.beta1", "0.9", Kind::Float, "AdamW first-moment decay"),
    ("train.beta2", "0.95", Kind::Float, "AdamW second-moment decay"),
    ("train.eps", "1e-8", Kind::Float, "AdamW epsilon"),
    ("train.batch_size", "32", Kind::Int, "slices per optimizer step"),
    ("train.max_epochs", "80", Kind::Int, "epoch limit"),
    ("train.max_steps", "0", Kind::Int, "optimizer step limit (0 = none)"),
    ("train.patience", "10", Kind::Int, "early-stopping patience in epochs"),
    ("train.holdout_every", "8", Kind::Int, "every k-th direction per shell is held out"),
    ("sample.stochastic", "true", Kind::Bool, "ancestral noise at each reverse step"),
    ("sample.clip_x0", "true", Kind::Bool, "clamp the implied clean image to [-1, 1] at each step"),
    ("sample.slices", "", Kind::IntList, "slices to synthesize (empty = all)"),
];

fn lookup(key: &str) -> Option<&'static (&'static str, &'static str, Kind, &'static str)> {
    KEYS.iter().find(|(k, ..)| *k == key)
}

fn check_value(key: &str, kind: Kind, value: &str) -> Result<()> {
    let bad = |what: &str| Err(Error::Config(format!("{key}: expected {what}, got {value:?}")));
    let ok = match kind {
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::IntList => value.is_empty() || value.split(',').all(|v| v.trim().parse::<u64>().is_ok()),
        Kind::FloatList => value.split(',').all(|v| v.trim().parse::<f64>().is_ok_and(f64::is_finite)),
        Kind::Choice(opts) => opts.contains(&value),
    };
    if ok {
        return Ok(());
    }
    match kind {
        Kind::Int => bad("a non-negative integer"),
        Kind::Float => bad("a finite number"),
        Kind::Bool => bad("true or false"),
        Kind::IntList => bad("comma-separated integers"),
        Kind::FloatList => bad("comma-separated numbers"),
        Kind::Choice(opts) => bad(&format!("one of {opts:?}")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, d, ..)| (k.to_string(), d.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies only the keys mentioned in `text` on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.apply(&std::fs::read_to_string(path)?)
    }

    pub fn is_known(key: &str) -> bool {
        lookup(key).is_some()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (_, _, kind, _) = lookup(key).ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
        check_value(key, *kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    fn int(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated on set")
    }

    fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on set")
    }

    fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    fn ints(&self, key: &str) -> Vec<usize> {
        let v = self.get(key);
        if v.is_empty() {
            return Vec::new();
        }
        v.split(',').map(|s| s.trim().parse().expect("validated on set")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("validated on set")
    }

    /// All keys in sorted order, including defaults.
    pub fn entries(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Commented listing of every key with its default.
    pub fn documented_defaults() -> String {
        KEYS.iter().map(|(k, d, _, doc)| format!("# {doc}\n{k} = {d}\n")).collect()
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            slices: self.int("phantom.slices"),
            height: self.int("phantom.height"),
            width: self.int("phantom.width"),
            n_tracts: self.int("phantom.tracts"),
            shells: self.get("phantom.shells").split(',').map(|s| s.trim().parse().expect("validated on set")).collect(),
            dirs_per_shell: self.int("phantom.dirs_per_shell"),
            noise_sigma: self.float("phantom.noise_sigma"),
            seed: self.seed(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let widths = self.ints("model.widths");
        let widths: [usize; 3] =
            widths.try_into().map_err(|w: Vec<usize>| Error::Config(format!("model.widths needs 3 values, got {}", w.len())))?;
        let cond = CondConfig {
            width: self.int("cond.width"),
            ffn_blocks: self.int("cond.ffn_blocks"),
            max_slices: self.int("cond.max_slices"),
        };
        let hdit = HditConfig {
            image_height: self.int("model.image_height"),
            image_width: self.int("model.image_width"),
            patch_size: self.int("model.patch_size"),
            widths,
            blocks_per_level: self.int("model.blocks"),
            bottleneck_blocks: self.int("model.bottleneck_blocks"),
            na_window: self.int("model.na_window"),
            head_dim: self.int("model.head_dim"),
            cond_width: cond.width,
        };
        let xi = self.float("adapter.xi");
        if xi < 0.0 {
            return Err(Error::Config(format!("adapter.xi must be >= 0, got {xi}")));
        }
        let m = ModelConfig { hdit, cond, adapter: self.flag("adapter.enabled"), enrichment: EnrichmentConfig { xi } };
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            steps: self.int("schedule.steps"),
            beta_start: self.float("schedule.beta_start"),
            beta_end: self.float("schedule.beta_end"),
            kappa: self.float("schedule.kappa"),
            delta: self.float("schedule.delta"),
            adc_form: if self.get("schedule.adc_form") == "mean" { AdcForm::Mean } else { AdcForm::Sum },
            lr: self.float("train.lr"),
            weight_decay: self.float("train.weight_decay"),
            betas: (self.float("train.beta1"), self.float("train.beta2")),
            eps: self.float("train.eps"),
            batch_size: self.int("train.batch_size"),
            max_epochs: self.int("train.max_epochs"),
            max_steps: self.int("train.max_steps"),
            early_stop_patience: self.int("train.patience"),
            holdout_every: self.int("train.holdout_every"),
            seed: self.seed(),
            stage: Stage::parse(self.get("train.stage"))?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn sampler_options(&self) -> SamplerOptions {
        SamplerOptions { stochastic: self.flag("sample.stochastic"), clip_x0: self.flag("sample.clip_x0") }
    }

    pub fn sample_slices(&self) -> Vec<usize> {
        self.ints("sample.slices")
    }
}
