//! Query-based conditional mapping.
//!
//! Four embeddings of width `cond.width` are summed and refined by a stack
//! of residual GEGLU feed-forward blocks:
//!
//! * timestep: sinusoidal features followed by a two-layer MLP,
//! * b-vector: two-layer MLP on the (clamped) direction,
//! * b-value: two-layer MLP on the log pre-feature `sign(x) ln(|x| + 1)`,
//! * slice index: learned lookup table.

use crate::autograd::{Tensor, Var};
use crate::error::{value_err, Error, Result};
use crate::params::{Binder, Init, ParamStore};

pub const PREFIX: &str = "cond.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionBundle {
    pub t: usize,
    pub bvec: [f64; 3],
    pub bval: f64,
    pub slice_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondConfig {
    pub width: usize,
    pub ffn_blocks: usize,
    pub max_slices: usize,
}

impl Default for CondConfig {
    fn default() -> Self {
        Self { width: 256, ffn_blocks: 2, max_slices: 16 }
    }
}

/// Guidance vector of width `cond.width`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceVector(pub Vec<f64>);

/// `sign(x) · ln(|x| + 1)` with `sign(0) = 0`.
pub fn real_embed_prefeature(x: f64) -> Result<f64> {
    if x.is_nan() {
        return value_err("real embedding of NaN");
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    Ok(x.signum() * x.abs().ln_1p())
}

/// `[cos(t f_k), sin(t f_k)]` with geometrically spaced frequencies.
pub fn sinusoidal_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t * freq).cos();
        out[half + k] = (t * freq).sin();
    }
    out
}

fn init_mlp(store: &mut ParamStore, name: &str, input: usize, width: usize, seed: u64) {
    store.init(format!("{name}.l1.w"), input, width, Init::FanIn, seed);
    store.init(format!("{name}.l1.b"), 1, width, Init::Zeros, seed);
    store.init(format!("{name}.l2.w"), width, width, Init::FanIn, seed);
    store.init(format!("{name}.l2.b"), 1, width, Init::Zeros, seed);
}

pub fn init_params(cfg: &CondConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    let w = cfg.width;
    init_mlp(&mut s, "cond.time", w, w, seed);
    init_mlp(&mut s, "cond.bval", 1, w, seed);
    init_mlp(&mut s, "cond.bvec", 3, w, seed);
    s.init("cond.slice.table", cfg.max_slices, w, Init::Normal(1.0), seed);
    for i in 0..cfg.ffn_blocks {
        s.init(format!("cond.ffn{i}.in.w"), w, 2 * w, Init::FanIn, seed);
        s.init(format!("cond.ffn{i}.in.b"), 1, 2 * w, Init::Zeros, seed);
        s.init(format!("cond.ffn{i}.out.w"), w, w, Init::Zeros, seed);
        s.init(format!("cond.ffn{i}.out.b"), 1, w, Init::Zeros, seed);
    }
    s
}

fn mlp(b: &mut Binder, name: &str, x: Var) -> Var {
    let (w1, b1) = (b.param(&format!("{name}.l1.w")), b.param(&format!("{name}.l1.b")));
    let (w2, b2) = (b.param(&format!("{name}.l2.w")), b.param(&format!("{name}.l2.b")));
    let h = b.graph.linear(x, w1, Some(b1));
    let h = b.graph.silu(h);
    b.graph.linear(h, w2, Some(b2))
}

pub fn real_embed_graph(b: &mut Binder, x: f64) -> Result<Var> {
    let pre = real_embed_prefeature(x)?;
    let input = b.graph.constant(Tensor::row_vector(vec![pre]));
    Ok(mlp(b, "cond.bval", input))
}

fn check_bvec(bvec: [f64; 3]) -> Result<[f64; 3]> {
    if bvec.iter().any(|v| !v.is_finite()) {
        return value_err("non-finite b-vector");
    }
    Ok(bvec.map(|v| v.clamp(-1.0, 1.0)))
}

pub fn bvec_embed_graph(b: &mut Binder, bvec: [f64; 3]) -> Result<Var> {
    let v = check_bvec(bvec)?;
    let input = b.graph.constant(Tensor::row_vector(v.to_vec()));
    Ok(mlp(b, "cond.bvec", input))
}

pub fn time_embed_graph(b: &mut Binder, t: usize, width: usize) -> Var {
    let input = b.graph.constant(Tensor::row_vector(sinusoidal_features(t as f64, width)));
    mlp(b, "cond.time", input)
}

/// Builds the guidance vector for `bundle` on the binder's graph, `(1, width)`.
pub fn fuse_graph(b: &mut Binder, bundle: &ConditionBundle, cfg: &CondConfig) -> Result<Var> {
    if bundle.slice_index >= cfg.max_slices {
        return Err(Error::Index(format!("slice {} >= max_slices {}", bundle.slice_index, cfg.max_slices)));
    }
    let te = time_embed_graph(b, bundle.t, cfg.width);
    let ve = bvec_embed_graph(b, bundle.bvec)?;
    let re = real_embed_graph(b, bundle.bval)?;
    let table = b.param("cond.slice.table");
    let se = b.graph.row_slice(table, bundle.slice_index, 1);
    let mut x = b.graph.add(te, ve);
    x = b.graph.add(x, re);
    x = b.graph.add(x, se);
    for i in 0..cfg.ffn_blocks {
        let (wi, bi) = (b.param(&format!("cond.ffn{i}.in.w")), b.param(&format!("cond.ffn{i}.in.b")));
        let (wo, bo) = (b.param(&format!("cond.ffn{i}.out.w")), b.param(&format!("cond.ffn{i}.out.b")));
        let h = b.graph.rms_norm(x);
        let h = b.graph.linear(h, wi, Some(bi));
        let h = b.graph.geglu(h);
        let h = b.graph.linear(h, wo, Some(bo));
        x = b.graph.add(x, h);
    }
    Ok(x)
}

pub fn real_embed(x: f64, params: &ParamStore) -> Result<Vec<f64>> {
    let mut b = Binder::new(params);
    let v = real_embed_graph(&mut b, x)?;
    Ok(b.graph.value(v).data.clone())
}

pub fn bvec_embed(bvec: [f64; 3], params: &ParamStore) -> Result<Vec<f64>> {
    let mut b = Binder::new(params);
    let v = bvec_embed_graph(&mut b, bvec)?;
    Ok(b.graph.value(v).data.clone())
}

pub fn fuse_conditions(bundle: &ConditionBundle, params: &ParamStore, cfg: &CondConfig) -> Result<GuidanceVector> {
    let mut b = Binder::new(params);
    let v = fuse_graph(&mut b, bundle, cfg)?;
    Ok(GuidanceVector(b.graph.value(v).data.clone()))
}
