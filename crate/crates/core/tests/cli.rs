use std::path::Path;
use std::process::{Command, Output};

use phydiff::engine::load_checkpoint;
use phydiff::volume_io::read_dvol;

const TINY: &[&str] = &[
    "--phantom.slices", "2", "--phantom.height", "16", "--phantom.width", "16",
    "--phantom.tracts", "1", "--phantom.dirs_per_shell", "8",
    "--model.image_height", "16", "--model.image_width", "16", "--model.patch_size", "2",
    "--model.widths", "8,16,32", "--model.na_window", "3", "--model.head_dim", "8",
    "--model.bottleneck_blocks", "1", "--cond.width", "8", "--cond.max_slices", "4",
    "--schedule.steps", "16", "--schedule.beta_start", "1e-3", "--schedule.beta_end", "0.2",
    "--train.batch_size", "4", "--train.max_steps", "4", "--train.holdout_every", "4",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phydiff"))
        .args(args)
        .env_remove("PHYDIFF_SEED")
        .output()
        .expect("spawn phydiff")
}

fn run_tiny(cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    for args in [&["train", "--bogus", "1"][..], &["frobnicate"], &[], &["eval", "--pred"]] {
        let out = run(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("usage:"));
    }
}

#[test]
fn help_and_print_config() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let out = run(&["--print-config"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("train.lr = 5e-4"));
}

#[test]
fn bad_config_value_is_runtime_error() {
    let out = run(&["make-phantom", "--train.lr", "fast"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn adapter_stage_needs_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    run_tiny("make-phantom", &["--out", s(dir.path())]);
    let out = run(&["train", "--data", s(dir.path()), "--stage", "adapter", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn eval_of_identical_volumes_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_tiny("make-phantom", &["--out", s(&data)]);
    let dwi = data.join("dwi.dvol");
    let out = run(&["eval", "--pred", s(&dwi), "--ref", s(&dwi), "--out", s(dir.path())]);
    assert!(out.status.success());
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let all = summary.lines().find(|l| l.starts_with("all,")).unwrap();
    let f: Vec<f64> = all.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(f[1], 100.0);
    assert_eq!(f[3], 100.0);
    let n = read_dvol(&dwi).unwrap().dims();
    let maps = std::fs::read_dir(dir.path().join("errmaps")).unwrap().count();
    assert_eq!(maps, n[0] * n[1]);
}

#[test]
fn adc_atlas_writes_each_shell() {
    let dir = tempfile::tempdir().unwrap();
    run_tiny("make-phantom", &["--out", s(dir.path())]);
    run_tiny("adc-atlas", &["--data", s(dir.path()), "--out", s(dir.path())]);
    for b in [1000, 2000] {
        let v = read_dvol(dir.path().join(format!("adc_b{b}.dvol"))).unwrap();
        assert_eq!(v.dims(), [1, 2, 16, 16]);
        assert!(v.data().iter().all(|x| x.is_finite() && *x >= 0.0));
    }
}

#[test]
fn two_stage_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    run_tiny("make-phantom", &["--out", s(&p("data"))]);
    run_tiny("train", &["--data", s(&p("data")), "--out", s(&p("s1")), "--seed", "3"]);
    let ck1 = load_checkpoint(p("s1/checkpoint.pdck")).unwrap();
    assert_eq!(ck1.step, 4);
    assert!(ck1.params.iter().all(|(n, _)| !n.starts_with("adp.")));

    run_tiny("train", &["--data", s(&p("data")), "--out", s(&p("s2")), "--stage", "adapter", "--init", s(&p("s1/checkpoint.pdck"))]);
    let ck2 = load_checkpoint(p("s2/checkpoint.pdck")).unwrap();
    assert!(ck2.params.iter().any(|(n, _)| n.starts_with("adp.")));
    for (name, t) in ck1.params.iter() {
        assert_eq!(ck2.params.get(name).unwrap().data, t.data, "{name} changed in stage 2");
    }

    run_tiny("sample", &["--data", s(&p("data")), "--checkpoint", s(&p("s2/checkpoint.pdck")), "--out", s(&p("out"))]);
    let samples = read_dvol(p("out/samples.dvol")).unwrap();
    assert_eq!(samples.dims(), [4, 2, 16, 16]);
    assert!(samples.data().iter().all(|v| v.is_finite()));
    let out = run(&["eval", "--pred", s(&p("out/samples.dvol")), "--ref", s(&p("out/reference.dvol")),
        "--bvals", s(&p("out/samples.bval")), "--out", s(&p("out"))]);
    assert!(out.status.success());
    let summary = std::fs::read_to_string(p("out/summary.csv")).unwrap();
    assert!(summary.contains("b1000,4,") && summary.contains("b2000,4,"), "{summary}");
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run_env = |out: &str, seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_phydiff"));
        c.arg("make-phantom").args(TINY).args(["--phantom.noise_sigma", "0.05", "--out", out]);
        match seed {
            Some(v) => c.env("PHYDIFF_SEED", v),
            None => c.env_remove("PHYDIFF_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        std::fs::read(Path::new(out).join("dwi.dvol")).unwrap()
    };
    let a = run_env(s(&dir.path().join("a")), Some("11"));
    let b = run_env(s(&dir.path().join("b")), Some("11"));
    let c = run_env(s(&dir.path().join("c")), None);
    assert_eq!(a, b);
    assert_ne!(a, c);
}
