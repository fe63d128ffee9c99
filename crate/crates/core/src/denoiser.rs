//! Hourglass neighbourhood-attention transformer predicting the added noise.
//!
//! ```text
//! image ─ patchify ─ stem + pos ─┬─ level 0 NA blocks ─ down ─┬─ level 1 ─ down ─┬─ level 2 ─ global blocks
//!                                │ (+ adapter feature 0)      │ (+ feature 1)     │ (+ feature 2)        │
//!                                └──────── skip 0 ──────┐     └──── skip 1 ──┐    └──── skip 2 ──┐       │
//! image ─ unpatchify ─ out ─ level 0 NA blocks ─ lerp ─ up ─ level 1 ─ lerp ─ up ─ level 2 ─ lerp ─────┘
//! ```
//!
//! Every block is pre-norm with guidance-driven scale/shift after each norm.
//! Residual output projections start at zero so a fresh model is an affine
//! map of its input.

use std::sync::Arc;

use crate::autograd::{GatherIndex, Neighborhood, Tensor, Var};
use crate::conditioning::{self, CondConfig, ConditionBundle};
use crate::error::{shape_err, Error, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::volume_io::Image;

pub const PREFIX: &str = "den.";
pub const LEVELS: usize = 3;
const FFN_MULT: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct HditConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub widths: [usize; LEVELS],
    pub blocks_per_level: usize,
    pub bottleneck_blocks: usize,
    pub na_window: usize,
    pub head_dim: usize,
    pub cond_width: usize,
}

impl Default for HditConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch_size: 4,
            widths: [64, 128, 256],
            blocks_per_level: 1,
            bottleneck_blocks: 2,
            na_window: 7,
            head_dim: 32,
            cond_width: 256,
        }
    }
}

impl HditConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "patch size {p} must divide image {}x{}",
                self.image_height, self.image_width
            )));
        }
        let (gh, gw) = self.grid(0);
        if gh % 4 != 0 || gw % 4 != 0 {
            return Err(Error::Config(format!("token grid {gh}x{gw} must be divisible by 4")));
        }
        if !self.widths.windows(2).all(|w| w[0] < w[1]) || self.widths[0] == 0 {
            return Err(Error::Config(format!("widths {:?} must be strictly increasing", self.widths)));
        }
        if self.na_window < 3 || self.na_window % 2 == 0 {
            return Err(Error::Config(format!("na_window {} must be odd and >= 3", self.na_window)));
        }
        for &w in &self.widths {
            if self.head_dim == 0 || w % self.head_dim.min(w) != 0 {
                return Err(Error::Config(format!("width {w} not divisible by head_dim {}", self.head_dim)));
            }
        }
        Ok(())
    }

    /// Token grid `(rows, cols)` at `level`.
    pub fn grid(&self, level: usize) -> (usize, usize) {
        let p = self.patch_size.max(1);
        ((self.image_height / p) >> level, (self.image_width / p) >> level)
    }

    pub fn heads(&self, width: usize) -> usize {
        width / self.head_dim.min(width)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Non-overlapping `p x p` patches of a `(C, H, W)` array, one row per patch
/// in row-major grid order; features ordered `(c, dr, dc)`.
pub fn patchify(data: &[f64], channels: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return shape_err(format!("patch size {p} does not divide {h}x{w}"));
    }
    if data.len() != channels * h * w {
        return shape_err(format!("expected {} values, got {}", channels * h * w, data.len()));
    }
    let (gh, gw) = (h / p, w / p);
    let feat = channels * p * p;
    let mut out = vec![0.0; gh * gw * feat];
    for gi in 0..gh {
        for gj in 0..gw {
            let row = &mut out[(gi * gw + gj) * feat..(gi * gw + gj + 1) * feat];
            for c in 0..channels {
                for dr in 0..p {
                    for dc in 0..p {
                        row[(c * p + dr) * p + dc] = data[(c * h + gi * p + dr) * w + gj * p + dc];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(gh * gw, feat, out))
}

pub fn unpatchify(tokens: &Tensor, channels: usize, h: usize, w: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return shape_err(format!("patch size {p} does not divide {h}x{w}"));
    }
    let (gh, gw) = (h / p, w / p);
    if tokens.shape() != (gh * gw, channels * p * p) {
        return shape_err(format!("token grid {:?} does not match {channels}x{h}x{w}/p{p}", tokens.shape()));
    }
    let feat = channels * p * p;
    let mut out = vec![0.0; channels * h * w];
    for gi in 0..gh {
        for gj in 0..gw {
            let row = &tokens.data[(gi * gw + gj) * feat..(gi * gw + gj + 1) * feat];
            for c in 0..channels {
                for dr in 0..p {
                    for dc in 0..p {
                        out[(c * h + gi * p + dr) * w + gj * p + dc] = row[(c * p + dr) * p + dc];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gather table for 2x2 space-to-depth of an `h x w` grid with `c` channels.
pub fn space_to_depth_index(h: usize, w: usize, c: usize) -> GatherIndex {
    let (oh, ow) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(h * w * c);
    for i in 0..oh {
        for j in 0..ow {
            for k in 0..4 {
                let (dr, dc) = (k / 2, k % 2);
                let src = (2 * i + dr) * w + 2 * j + dc;
                index.extend((0..c).map(|ch| (src * c + ch) as u32));
            }
        }
    }
    GatherIndex { rows: oh * ow, cols: 4 * c, index }
}

/// Gather table for 2x2 depth-to-space producing a `2h x 2w` grid with `c` channels.
pub fn depth_to_space_index(h: usize, w: usize, c: usize) -> GatherIndex {
    let (oh, ow) = (2 * h, 2 * w);
    let mut index = Vec::with_capacity(oh * ow * c);
    for r in 0..oh {
        for q in 0..ow {
            let (i, j, k) = (r / 2, q / 2, (r % 2) * 2 + q % 2);
            let src_row = i * w + j;
            index.extend((0..c).map(|ch| (src_row * 4 * c + k * c + ch) as u32));
        }
    }
    GatherIndex { rows: oh * ow, cols: c, index }
}

fn init_block(s: &mut ParamStore, path: &str, c: usize, cond: usize, seed: u64) {
    let f = FFN_MULT * c;
    s.init(format!("{path}.mod.w"), cond, 4 * c, Init::Zeros, seed);
    s.init(format!("{path}.mod.b"), 1, 4 * c, Init::Zeros, seed);
    s.init(format!("{path}.attn.qkv.w"), c, 3 * c, Init::FanIn, seed);
    s.init(format!("{path}.attn.qkv.b"), 1, 3 * c, Init::Zeros, seed);
    s.init(format!("{path}.attn.out.w"), c, c, Init::Zeros, seed);
    s.init(format!("{path}.attn.out.b"), 1, c, Init::Zeros, seed);
    s.init(format!("{path}.ffn.in.w"), c, 2 * f, Init::FanIn, seed);
    s.init(format!("{path}.ffn.in.b"), 1, 2 * f, Init::Zeros, seed);
    s.init(format!("{path}.ffn.out.w"), f, c, Init::Zeros, seed);
    s.init(format!("{path}.ffn.out.b"), 1, c, Init::Zeros, seed);
}

fn enc_path(level: usize, i: usize) -> String {
    format!("den.l{level}.enc{i}")
}

fn dec_path(level: usize, i: usize) -> String {
    format!("den.l{level}.dec{i}")
}

pub fn init_params(cfg: &HditConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let [c0, ..] = cfg.widths;
    let (gh, gw) = cfg.grid(0);
    s.init("den.stem.w", cfg.patch_dim(), c0, Init::FanIn, seed);
    s.init("den.stem.b", 1, c0, Init::Zeros, seed);
    s.init("den.pos", gh * gw, c0, Init::Normal(0.02), seed);
    for (l, &c) in cfg.widths.iter().enumerate() {
        for i in 0..cfg.blocks_per_level {
            init_block(&mut s, &enc_path(l, i), c, cfg.cond_width, seed);
            init_block(&mut s, &dec_path(l, i), c, cfg.cond_width, seed);
        }
        s.init(format!("den.skip{l}.m"), 1, c, Init::Const(0.5), seed);
        if l + 1 < LEVELS {
            let next = cfg.widths[l + 1];
            s.init(format!("den.down{l}.w"), 4 * c, next, Init::FanIn, seed);
            s.init(format!("den.down{l}.b"), 1, next, Init::Zeros, seed);
            s.init(format!("den.up{l}.w"), next, 4 * c, Init::FanIn, seed);
            s.init(format!("den.up{l}.b"), 1, 4 * c, Init::Zeros, seed);
        }
    }
    for i in 0..cfg.bottleneck_blocks {
        init_block(&mut s, &format!("den.mid{i}"), cfg.widths[LEVELS - 1], cfg.cond_width, seed);
    }
    s.init("den.out.w", c0, cfg.patch_dim(), Init::FanIn, seed);
    s.init("den.out.b", 1, cfg.patch_dim(), Init::Zeros, seed);
    Ok(s)
}

/// One transformer block: attention restricted to `nb`, then a GEGLU FFN.
/// `guidance` is the activated `(1, cond_width)` guidance row.
pub fn na_block(b: &mut Binder, x: Var, guidance: Var, path: &str, heads: usize, nb: Arc<Neighborhood>) -> Var {
    let c = b.graph.value(x).cols;
    let (mw, mb) = (b.param(&format!("{path}.mod.w")), b.param(&format!("{path}.mod.b")));
    let m = b.graph.linear(guidance, mw, Some(mb));
    let scale1 = b.graph.col_slice(m, 0, c);
    let shift1 = b.graph.col_slice(m, c, c);
    let scale2 = b.graph.col_slice(m, 2 * c, c);
    let shift2 = b.graph.col_slice(m, 3 * c, c);

    let h = b.graph.rms_norm(x);
    let h = b.graph.modulate(h, scale1, shift1);
    let (qw, qb) = (b.param(&format!("{path}.attn.qkv.w")), b.param(&format!("{path}.attn.qkv.b")));
    let qkv = b.graph.linear(h, qw, Some(qb));
    let q = b.graph.col_slice(qkv, 0, c);
    let k = b.graph.col_slice(qkv, c, c);
    let v = b.graph.col_slice(qkv, 2 * c, c);
    let a = b.graph.attention(q, k, v, heads, nb);
    let (ow, ob) = (b.param(&format!("{path}.attn.out.w")), b.param(&format!("{path}.attn.out.b")));
    let a = b.graph.linear(a, ow, Some(ob));
    let x = b.graph.add(x, a);

    let h = b.graph.rms_norm(x);
    let h = b.graph.modulate(h, scale2, shift2);
    let (iw, ib) = (b.param(&format!("{path}.ffn.in.w")), b.param(&format!("{path}.ffn.in.b")));
    let h = b.graph.linear(h, iw, Some(ib));
    let h = b.graph.geglu(h);
    let (fw, fb) = (b.param(&format!("{path}.ffn.out.w")), b.param(&format!("{path}.ffn.out.b")));
    let h = b.graph.linear(h, fw, Some(fb));
    b.graph.add(x, h)
}

/// 2x2 space-to-depth followed by a projection `den.down{level}`.
pub fn level_down(b: &mut Binder, x: Var, grid: (usize, usize), level: usize) -> Result<Var> {
    let (h, w) = grid;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("level_down needs even grid, got {h}x{w}"));
    }
    let c = b.graph.value(x).cols;
    if b.graph.value(x).rows != h * w {
        return shape_err(format!("token count {} does not match grid {h}x{w}", b.graph.value(x).rows));
    }
    let merged = b.graph.gather(x, Arc::new(space_to_depth_index(h, w, c)));
    let (pw, pb) = (b.param(&format!("den.down{level}.w")), b.param(&format!("den.down{level}.b")));
    Ok(b.graph.linear(merged, pw, Some(pb)))
}

/// Projection `den.up{level}` then 2x2 depth-to-space, merged with `skip` by
/// the learned interpolation `m * up + (1 - m) * skip`. `grid` is the coarse grid.
pub fn level_up(b: &mut Binder, x: Var, skip: Var, grid: (usize, usize), level: usize) -> Result<Var> {
    let (h, w) = grid;
    if b.graph.value(x).rows != h * w {
        return shape_err(format!("token count {} does not match grid {h}x{w}", b.graph.value(x).rows));
    }
    let (pw, pb) = (b.param(&format!("den.up{level}.w")), b.param(&format!("den.up{level}.b")));
    let y = b.graph.linear(x, pw, Some(pb));
    let c = b.graph.value(y).cols / 4;
    let up = b.graph.gather(y, Arc::new(depth_to_space_index(h, w, c)));
    if b.graph.value(up).shape() != b.graph.value(skip).shape() {
        return shape_err(format!(
            "skip {:?} does not match upsampled {:?}",
            b.graph.value(skip).shape(),
            b.graph.value(up).shape()
        ));
    }
    let m = b.param(&format!("den.skip{level}.m"));
    Ok(b.graph.lerp(m, up, skip))
}

/// Noise prediction on the binder's graph, returned in token layout `(N0, p²)`.
pub fn predict_noise_graph(
    b: &mut Binder,
    cfg: &HditConfig,
    cond: &CondConfig,
    x_t: &Image,
    bundle: &ConditionBundle,
    adapter_feats: Option<&[Var; LEVELS]>,
) -> Result<Var> {
    if x_t.height != cfg.image_height || x_t.width != cfg.image_width {
        return shape_err(format!(
            "input {}x{} does not match model {}x{}",
            x_t.height, x_t.width, cfg.image_height, cfg.image_width
        ));
    }
    if cond.width != cfg.cond_width {
        return Err(Error::Config(format!("cond width {} != model cond width {}", cond.width, cfg.cond_width)));
    }
    let tokens = patchify(&x_t.data, 1, x_t.height, x_t.width, cfg.patch_size)?;
    let guidance = conditioning::fuse_graph(b, bundle, cond)?;
    let guidance = b.graph.silu(guidance);

    let input = b.graph.constant(tokens);
    let (sw, sb) = (b.param("den.stem.w"), b.param("den.stem.b"));
    let mut h = b.graph.linear(input, sw, Some(sb));
    let pos = b.param("den.pos");
    h = b.graph.add(h, pos);

    let mut skips = Vec::with_capacity(LEVELS);
    for level in 0..LEVELS {
        if level > 0 {
            h = level_down(b, h, cfg.grid(level - 1), level - 1)?;
        }
        if let Some(feats) = adapter_feats {
            let (fs, hs) = (b.graph.value(feats[level]).shape(), b.graph.value(h).shape());
            if fs != hs {
                return shape_err(format!("adapter feature {level} shape {fs:?} != token grid {hs:?}"));
            }
            h = b.graph.add(h, feats[level]);
        }
        let (gh, gw) = cfg.grid(level);
        let nb = Arc::new(Neighborhood::clamped(gh, gw, cfg.na_window));
        let heads = cfg.heads(cfg.widths[level]);
        for i in 0..cfg.blocks_per_level {
            h = na_block(b, h, guidance, &enc_path(level, i), heads, nb.clone());
        }
        skips.push(h);
    }

    let (gh, gw) = cfg.grid(LEVELS - 1);
    let global = Arc::new(Neighborhood::global(gh * gw));
    let heads = cfg.heads(cfg.widths[LEVELS - 1]);
    for i in 0..cfg.bottleneck_blocks {
        h = na_block(b, h, guidance, &format!("den.mid{i}"), heads, global.clone());
    }

    for level in (0..LEVELS).rev() {
        h = if level + 1 < LEVELS {
            level_up(b, h, skips[level], cfg.grid(level + 1), level)?
        } else {
            let m = b.param(&format!("den.skip{level}.m"));
            b.graph.lerp(m, h, skips[level])
        };
        let (gh, gw) = cfg.grid(level);
        let nb = Arc::new(Neighborhood::clamped(gh, gw, cfg.na_window));
        let heads = cfg.heads(cfg.widths[level]);
        for i in 0..cfg.blocks_per_level {
            h = na_block(b, h, guidance, &dec_path(level, i), heads, nb.clone());
        }
    }
    let (ow, ob) = (b.param("den.out.w"), b.param("den.out.b"));
    Ok(b.graph.linear(h, ow, Some(ob)))
}

/// Per-level adapter features in token layout, one `(rows, width)` tensor per level.
pub type AdapterFeatures = [Tensor; LEVELS];

pub fn predict_noise(
    params: &ParamStore,
    cfg: &HditConfig,
    cond: &CondConfig,
    x_t: &Image,
    bundle: &ConditionBundle,
    adapter_feats: Option<&AdapterFeatures>,
) -> Result<Image> {
    let mut b = Binder::new(params);
    let feats = adapter_feats.map(|f| [0, 1, 2].map(|l| b.graph.constant(f[l].clone())));
    let out = predict_noise_graph(&mut b, cfg, cond, x_t, bundle, feats.as_ref())?;
    let data = unpatchify(b.graph.value(out), 1, x_t.height, x_t.width, cfg.patch_size)?;
    Image::new(x_t.height, x_t.width, data)
}
