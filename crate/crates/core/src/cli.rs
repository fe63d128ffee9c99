//! Command-line front end.
//!
//! ```text
//! phydiff <command> [--config FILE] [--seed N] [--out DIR] [--<config.key> VALUE ...] [command flags]
//! ```
//!
//! Data directories hold `dwi.dvol`, `dwi.bval`, `dwi.bvec` and optionally
//! `atlas.dvol` (42 channels). Exit code 0 on success, 2 on usage errors,
//! 1 on runtime errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::engine::{self, Checkpoint, Dataset, OptState, RngState, SampleRequest, Stage};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalPair, EvalReport};
use crate::phantom;
use crate::physics::{self, AdcForm};
use crate::volume_io::{self, DwiStack, GradientTable, TractAtlas, Volume};

pub const SEED_ENV: &str = "PHYDIFF_SEED";

pub const USAGE: &str = "\
usage: phydiff <command> [options]

commands:
  make-phantom   synthesize a multi-shell phantom          (--out)
  adc-atlas      per-shell ADC atlases from a dataset       (--data, --out, [--shell B], [--adc-mean])
  train          train the denoiser or the adapter          (--data, --out, [--stage S], [--init CKPT])
  sample         synthesize held-out directions             (--data, --checkpoint, --out)
  eval           SSIM/PSNR report and error maps            (--pred, --ref, --out, [--bvals FILE])

common options:
  --config FILE      key = value run configuration
  --seed N           master seed (falls back to the config, then $PHYDIFF_SEED)
  --out DIR          output directory (default: .)
  --<key> VALUE      override any configuration key, e.g. --train.lr 1e-3
  --print-config     print every configuration key with its default and exit
  --help             this text
";

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

const COMMANDS: &[&str] = &["make-phantom", "adc-atlas", "train", "sample", "eval"];
/// Flags that take a value, per command.
const VALUE_FLAGS: &[(&str, &[&str])] = &[
    ("make-phantom", &[]),
    ("adc-atlas", &["data", "shell"]),
    ("train", &["data", "stage", "init"]),
    ("sample", &["data", "checkpoint"]),
    ("eval", &["pred", "ref", "bvals"]),
];
const SWITCHES: &[(&str, &[&str])] = &[("adc-atlas", &["adc-mean"])];

struct Invocation {
    command: String,
    config: RunConfig,
    out: PathBuf,
    flags: BTreeMap<String, String>,
    switches: Vec<String>,
}

impl Invocation {
    fn flag(&self, name: &str) -> CliResult<&str> {
        self.flags.get(name).map(String::as_str).ok_or_else(|| CliError::Usage(format!("{} requires --{name}", self.command)))
    }

    fn has(&self, switch: &str) -> bool {
        self.switches.iter().any(|s| s == switch)
    }
}

fn parse_args(args: &[String]) -> CliResult<Option<Invocation>> {
    let mut it = args.iter();
    let command = match it.next() {
        None => return Err(CliError::Usage("missing command".into())),
        Some(c) if c == "--help" || c == "-h" => return Ok(None),
        Some(c) if c == "--print-config" => {
            print!("{}", RunConfig::documented_defaults());
            return Ok(None);
        }
        Some(c) => c.clone(),
    };
    if !COMMANDS.contains(&command.as_str()) {
        return Err(CliError::Usage(format!("unknown command {command:?}")));
    }
    let value_flags = VALUE_FLAGS.iter().find(|(c, _)| *c == command).map_or(&[][..], |(_, f)| f);
    let switches_ok = SWITCHES.iter().find(|(c, _)| *c == command).map_or(&[][..], |(_, f)| f);

    let mut config_path = None;
    let mut seed = None;
    let mut out = PathBuf::from(".");
    let mut overrides = Vec::new();
    let mut flags = BTreeMap::new();
    let mut switches = Vec::new();
    while let Some(arg) = it.next() {
        let name = arg.strip_prefix("--").ok_or_else(|| CliError::Usage(format!("unexpected argument {arg:?}")))?;
        if name == "help" {
            return Ok(None);
        }
        if switches_ok.contains(&name) {
            switches.push(name.to_string());
            continue;
        }
        let value = it.next().ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?.clone();
        match name {
            "config" => config_path = Some(value),
            "seed" => seed = Some(value),
            "out" => out = PathBuf::from(value),
            n if value_flags.contains(&n) => {
                flags.insert(n.to_string(), value);
            }
            n if RunConfig::is_known(n) => overrides.push((n.to_string(), value)),
            n => return Err(CliError::Usage(format!("unknown option --{n}"))),
        }
    }

    let mut config = RunConfig::default();
    if let Ok(env) = std::env::var(SEED_ENV) {
        config.set("seed", env.trim())?;
    }
    if let Some(path) = config_path {
        config.apply_file(&path)?;
    }
    for (k, v) in overrides {
        config.set(&k, &v)?;
    }
    if let Some(s) = seed {
        config.set("seed", &s)?;
    }
    if let Some(stage) = flags.get("stage") {
        config.set("train.stage", stage)?;
    }
    Ok(Some(Invocation { command, config, out, flags, switches }))
}

/// Runs one command; `args` excludes the program name. Returns the exit code.
pub fn cli_main(args: &[String]) -> i32 {
    let inv = match parse_args(args) {
        Ok(Some(inv)) => inv,
        Ok(None) => {
            print!("{USAGE}");
            return 0;
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            return 2;
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let result = match inv.command.as_str() {
        "make-phantom" => make_phantom(&inv),
        "adc-atlas" => adc_atlas(&inv),
        "train" => train(&inv),
        "sample" => sample(&inv),
        "eval" => eval(&inv),
        _ => unreachable!("validated in parse_args"),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            2
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn out_dir(inv: &Invocation) -> Result<&Path> {
    std::fs::create_dir_all(&inv.out)?;
    Ok(&inv.out)
}

pub fn write_dataset(dir: &Path, stack: &DwiStack, atlas: Option<&TractAtlas>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    volume_io::write_dvol(dir.join("dwi.dvol"), &stack.volume)?;
    volume_io::write_gradients(dir.join("dwi.bval"), dir.join("dwi.bvec"), &stack.gradients)?;
    if let Some(a) = atlas {
        volume_io::write_dvol(dir.join("atlas.dvol"), &a.volume)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(DwiStack, Option<TractAtlas>)> {
    let volume = volume_io::read_dvol(dir.join("dwi.dvol"))?;
    let table = volume_io::read_gradients(dir.join("dwi.bval"), dir.join("dwi.bvec"))?;
    let stack = DwiStack::new(volume, table)?;
    let atlas_path = dir.join("atlas.dvol");
    let atlas = if atlas_path.exists() { Some(TractAtlas::new(volume_io::read_dvol(atlas_path)?)?) } else { None };
    Ok((stack, atlas))
}

fn make_phantom(inv: &Invocation) -> CliResult<String> {
    let spec = inv.config.phantom_spec();
    let data = phantom::generate(&spec)?;
    let dir = out_dir(inv)?;
    write_dataset(dir, &data.stack, Some(&data.atlas))?;
    Ok(format!(
        "make-phantom: {} volumes of {}x{}x{} ({} tracts) -> {}",
        data.stack.directions(),
        spec.slices,
        spec.height,
        spec.width,
        spec.n_tracts,
        dir.display()
    ))
}

fn adc_atlas(inv: &Invocation) -> CliResult<String> {
    let (stack, _) = read_dataset(Path::new(inv.flag("data")?))?;
    let form = if inv.has("adc-mean") || inv.config.get("schedule.adc_form") == "mean" { AdcForm::Mean } else { AdcForm::Sum };
    let shells = match inv.flags.get("shell") {
        Some(s) => vec![s.parse::<f64>().map_err(|_| CliError::Usage(format!("--shell expects a number, got {s:?}")))?],
        None => stack.gradients.shells(),
    };
    let dir = out_dir(inv)?;
    let mut written = Vec::new();
    for b in shells {
        let atlas = physics::estimate_adc_atlas(&stack, b, form)?;
        let [z, h, w] = atlas.dims;
        let name = format!("adc_b{}.dvol", b.round() as i64);
        volume_io::write_dvol(dir.join(&name), &Volume::new([1, z, h, w], atlas.values)?)?;
        written.push(name);
    }
    Ok(format!("adc-atlas: {:?} form, wrote {}", form, written.join(", ")))
}

fn loss_csv(losses: &[f64], val: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.17e}", i + 1);
    }
    s.push_str("epoch,val_loss\n");
    for (i, l) in val.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.17e}", i + 1);
    }
    s
}

fn train(inv: &Invocation) -> CliResult<String> {
    let model = inv.config.model_config()?;
    let cfg = inv.config.train_config()?;
    let mut params = match (cfg.stage, inv.flags.get("init")) {
        (Stage::Denoiser, None) => engine::init_model(&model, Stage::Denoiser, cfg.seed)?,
        (Stage::Denoiser, Some(path)) => engine::load_checkpoint_for(path, &model)?.params,
        (Stage::Adapter, None) => {
            return Err(Error::Config("train.stage = adapter requires a stage-1 checkpoint (--init)".into()).into());
        }
        (Stage::Adapter, Some(path)) => {
            if !model.adapter {
                return Err(Error::Config("train.stage = adapter with adapter.enabled = false".into()).into());
            }
            let ck = engine::load_checkpoint_for(path, &model)?;
            let mut p = ck.params;
            for (name, t) in engine::init_model(&model, Stage::Adapter, cfg.seed)?.iter() {
                if !p.contains(name) {
                    p.insert(name, t.clone());
                }
            }
            p
        }
    };
    let (stack, atlas) = read_dataset(Path::new(inv.flag("data")?))?;
    let data = Dataset::new(&stack, atlas.as_ref().filter(|_| model.adapter), &model, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptState::default();
    let report = engine::train(&mut params, &model, &data, &cfg, &mut rng, &mut state, &mut |_, _| {})?;
    let ck = Checkpoint {
        stage: cfg.stage,
        step: state.step,
        rng: RngState::capture(&rng),
        norm: data.norm,
        config: inv.config.entries(),
        params,
    };
    let dir = out_dir(inv)?;
    engine::save_checkpoint(dir.join("checkpoint.pdck"), &ck)?;
    std::fs::write(dir.join("losses.csv"), loss_csv(&report.losses, &report.val_losses)).map_err(Error::from)?;
    let sm = engine::smooth(&report.losses, 20);
    Ok(format!(
        "train: stage {} {} steps, {} epochs{}, smoothed loss {:.4} -> {:.4}, best val {:.4} (epoch {})",
        cfg.stage.tag(),
        state.step,
        report.epochs,
        if report.stopped_early { " (early stop)" } else { "" },
        sm.first().copied().unwrap_or(f64::NAN),
        sm.last().copied().unwrap_or(f64::NAN),
        report.val_losses.iter().copied().fold(f64::INFINITY, f64::min),
        report.best_epoch
    ))
}

/// Held-out sampling: one output channel per test direction, slices as configured.
fn sample(inv: &Invocation) -> CliResult<String> {
    let model = inv.config.model_config()?;
    let cfg = inv.config.train_config()?;
    let ck = engine::load_checkpoint_for(inv.flag("checkpoint")?, &model)?;
    let (stack, atlas) = read_dataset(Path::new(inv.flag("data")?))?;
    let use_adapter = model.adapter && ck.stage == Stage::Adapter;
    let data = Dataset::new(&stack, atlas.as_ref().filter(|_| use_adapter), &model, &cfg)?;
    let [zs, h, w] = data.dims;
    let mut slices = inv.config.sample_slices();
    if slices.is_empty() {
        slices = (0..zs).collect();
    }
    if let Some(&bad) = slices.iter().find(|&&z| z >= zs) {
        return Err(Error::Config(format!("sample.slices contains {bad}, data has {zs} slices")).into());
    }
    let mut reqs = Vec::new();
    for &d in &data.test_dirs {
        let g = &data.stack.gradients.entries[d];
        for &z in &slices {
            reqs.push(SampleRequest { bvec: g.bvec, bval: g.bval, slice_index: z, atlas: if use_adapter { data.atlas_slice(z) } else { None } });
        }
    }
    let imgs = engine::sample_many(&ck.params, &model, &reqs, &data.schedules, inv.config.sampler_options(), cfg.seed)?;
    let (lo, hi) = ck.norm;
    let range = if hi > lo { hi - lo } else { 1.0 };
    let dims = [data.test_dirs.len(), slices.len(), h, w];
    let samples: Vec<f64> = imgs.iter().flat_map(|img| img.data.iter().map(|v| (v + 1.0) / 2.0 * range + lo)).collect();
    let mut reference = Vec::with_capacity(samples.len());
    let mut b0copy = Vec::with_capacity(samples.len());
    for &d in &data.test_dirs {
        for &z in &slices {
            reference.extend(data.stack.volume.image(d, z).data);
            b0copy.extend(data.b0.image(0, z).data);
        }
    }
    let table = GradientTable { entries: data.test_dirs.iter().map(|&d| data.stack.gradients.entries[d]).collect() };
    let dir = out_dir(inv)?;
    volume_io::write_dvol(dir.join("samples.dvol"), &Volume::new(dims, samples)?)?;
    volume_io::write_dvol(dir.join("reference.dvol"), &Volume::new(dims, reference)?)?;
    volume_io::write_dvol(dir.join("b0copy.dvol"), &Volume::new(dims, b0copy)?)?;
    volume_io::write_gradients(dir.join("samples.bval"), dir.join("samples.bvec"), &table)?;
    Ok(format!("sample: {} directions x {} slices -> {}", dims[0], dims[1], dir.join("samples.dvol").display()))
}

/// Scores every `(channel, slice)` image of `pred` against `reference`.
pub fn evaluate_volumes(pred: &Volume, reference: &Volume, bvals: Option<&[f64]>) -> Result<EvalReport> {
    if pred.dims() != reference.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs reference {:?}", pred.dims(), reference.dims())));
    }
    let [c, z, _, _] = pred.dims();
    if let Some(b) = bvals {
        if b.len() != c {
            return Err(Error::Shape(format!("{} b-values for {c} channels", b.len())));
        }
    }
    let preds: Vec<_> = (0..c).flat_map(|ci| (0..z).map(move |zi| (ci, zi))).map(|(ci, zi)| pred.image(ci, zi)).collect();
    let refs: Vec<_> = (0..c).flat_map(|ci| (0..z).map(move |zi| (ci, zi))).map(|(ci, zi)| reference.image(ci, zi)).collect();
    let pairs: Vec<EvalPair> = (0..c * z)
        .map(|i| EvalPair {
            label: format!("c{}_z{}", i / z, i % z),
            bval: bvals.map_or(0.0, |b| b[i / z]),
            pred: &preds[i],
            reference: &refs[i],
        })
        .collect();
    EvalReport::from_pairs(&pairs)
}

fn eval(inv: &Invocation) -> CliResult<String> {
    let pred = volume_io::read_dvol(inv.flag("pred")?)?;
    let reference = volume_io::read_dvol(inv.flag("ref")?)?;
    let bvals = match inv.flags.get("bvals") {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::from)?;
            let v = text
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad b-value {s:?} in {p}"))))
                .collect::<Result<Vec<_>>>()?;
            Some(v)
        }
        None => None,
    };
    let report = evaluate_volumes(&pred, &reference, bvals.as_deref())?;
    let dir = out_dir(inv)?;
    std::fs::write(dir.join("report.csv"), report.rows_csv()).map_err(Error::from)?;
    std::fs::write(dir.join("summary.csv"), report.summary_csv()).map_err(Error::from)?;
    let maps = dir.join("errmaps");
    std::fs::create_dir_all(&maps).map_err(Error::from)?;
    let [c, z, _, _] = pred.dims();
    for ci in 0..c {
        for zi in 0..z {
            let m = metrics::error_map(&pred.image(ci, zi), &reference.image(ci, zi))?;
            metrics::write_pgm(maps.join(format!("c{ci}_z{zi}.pgm")), &m)?;
        }
    }
    let all = report.pooled().ok_or_else(|| Error::Value("nothing to evaluate".into()))?;
    Ok(format!(
        "eval: {} images, SSIM {:.1}% ± {:.1}, PSNR {:.2} dB ± {:.2}",
        all.n, all.ssim_mean, all.ssim_std, all.psnr_mean, all.psnr_std
    ))
}
