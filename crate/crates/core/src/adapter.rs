//! Tract-atlas adapter.
//!
//! Empty atlas slices are first enriched from the b=0 image. A 42-channel
//! slice is then pixel-unshuffled to the denoiser's level-0 token grid,
//! projected to the level-0 width, and passed through one ResNet block per
//! level with 2x downsampling in between. Each level's features go through a
//! zero-initialized 1x1 projection and are added to the matching denoiser
//! level, so a fresh adapter leaves the denoiser untouched.

use std::sync::Arc;

use crate::autograd::{GatherIndex, Tensor, Var, GATHER_ZERO};
use crate::denoiser::{space_to_depth_index, AdapterFeatures, HditConfig, LEVELS};
use crate::error::{shape_err, value_err, Error, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::volume_io::{minmax_normalize, TractAtlas, Volume, TRACT_CHANNELS};

pub const PREFIX: &str = "adp.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnrichmentConfig {
    pub xi: f64,
}

impl Default for EnrichmentConfig {
    fn default() -> Self {
        Self { xi: 1.0 }
    }
}

/// Replaces every channel of each all-zero slice by
/// `(Σ_k c_k + ξ) · f_N(S_b0)`, where the channel sum of an empty slice is 0
/// and `f_N` min-max scales the b=0 slice to `[0, 1]`.
pub fn enrich_empty_slices(atlas: &TractAtlas, b0: &Volume, cfg: &EnrichmentConfig) -> Result<TractAtlas> {
    if !(cfg.xi >= 0.0) {
        return value_err(format!("xi must be >= 0, got {}", cfg.xi));
    }
    let [ch, z, h, w] = atlas.volume.dims();
    let bd = b0.dims();
    if bd[0] != 1 || bd[1] != z || bd[2] != h || bd[3] != w {
        return shape_err(format!("b0 dims {bd:?} do not match atlas slices {z}x{h}x{w}"));
    }
    let plane = h * w;
    let mut out = atlas.volume.clone();
    for zi in 0..z {
        let empty = (0..ch).all(|c| atlas.volume.image(c, zi).data.iter().all(|&v| v == 0.0));
        if !empty {
            continue;
        }
        let b0_slice = b0.image(0, zi);
        let normalized = minmax_normalize(&b0_slice.data, 0.0, 1.0)?;
        // the per-slice channel sum is zero on an empty slice
        let channel_sum = 0.0;
        let data = out.data_mut();
        for c in 0..ch {
            let off = (c * z + zi) * plane;
            for (dst, &n) in data[off..off + plane].iter_mut().zip(&normalized) {
                *dst = (channel_sum + cfg.xi) * n;
            }
        }
    }
    TractAtlas::new(out)
}

/// `(C, H, W) -> (C r², H/r, W/r)`, channel-major within each `r x r` cell.
pub fn pixel_unshuffle(x: &[f64], c: usize, h: usize, w: usize, r: usize) -> Result<Vec<f64>> {
    if r == 0 || h % r != 0 || w % r != 0 {
        return shape_err(format!("factor {r} does not divide {h}x{w}"));
    }
    if x.len() != c * h * w {
        return shape_err(format!("expected {} values, got {}", c * h * w, x.len()));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for dr in 0..r {
            for dc in 0..r {
                let oc = (ci * r + dr) * r + dc;
                for i in 0..oh {
                    for j in 0..ow {
                        out[(oc * oh + i) * ow + j] = x[(ci * h + i * r + dr) * w + j * r + dc];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_unshuffle`]: `(C r², H, W) -> (C, H r, W r)`.
pub fn pixel_shuffle(x: &[f64], c_out: usize, h: usize, w: usize, r: usize) -> Result<Vec<f64>> {
    if r == 0 || x.len() != c_out * r * r * h * w {
        return shape_err(format!("pixel_shuffle: {} values for {c_out}x{r}²x{h}x{w}", x.len()));
    }
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; x.len()];
    for ci in 0..c_out {
        for dr in 0..r {
            for dc in 0..r {
                let ic = (ci * r + dr) * r + dc;
                for i in 0..h {
                    for j in 0..w {
                        out[(ci * oh + i * r + dr) * ow + j * r + dc] = x[(ic * h + i) * w + j];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// im2col table for a zero-padded 3x3 convolution on an `h x w` grid.
pub fn conv3x3_index(h: usize, w: usize, c: usize) -> GatherIndex {
    let mut index = Vec::with_capacity(h * w * 9 * c);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (r, q) = (i + di, j + dj);
                    if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                        index.extend(std::iter::repeat_n(GATHER_ZERO, c));
                    } else {
                        let src = r as usize * w + q as usize;
                        index.extend((0..c).map(|ch| (src * c + ch) as u32));
                    }
                }
            }
        }
    }
    GatherIndex { rows: h * w, cols: 9 * c, index }
}

pub fn init_params(cfg: &HditConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    let r = cfg.patch_size;
    let c0 = cfg.widths[0];
    s.init("adp.stem.w", TRACT_CHANNELS * r * r, c0, Init::FanIn, seed);
    s.init("adp.stem.b", 1, c0, Init::Zeros, seed);
    for (l, &c) in cfg.widths.iter().enumerate() {
        s.init(format!("adp.res{l}.conv1.w"), 9 * c, c, Init::FanIn, seed);
        s.init(format!("adp.res{l}.conv1.b"), 1, c, Init::Zeros, seed);
        s.init(format!("adp.res{l}.conv2.w"), 9 * c, c, Init::FanIn, seed);
        s.init(format!("adp.res{l}.conv2.b"), 1, c, Init::Zeros, seed);
        s.init(format!("adp.proj{l}.w"), c, c, Init::Zeros, seed);
        s.init(format!("adp.proj{l}.b"), 1, c, Init::Zeros, seed);
        if l + 1 < LEVELS {
            s.init(format!("adp.down{l}.w"), 4 * c, cfg.widths[l + 1], Init::FanIn, seed);
            s.init(format!("adp.down{l}.b"), 1, cfg.widths[l + 1], Init::Zeros, seed);
        }
    }
    s
}

fn resnet_block(b: &mut Binder, x: Var, grid: (usize, usize), level: usize) -> Var {
    let c = b.graph.value(x).cols;
    let idx = Arc::new(conv3x3_index(grid.0, grid.1, c));
    let mut h = x;
    for conv in ["conv1", "conv2"] {
        let (w, bias) = (b.param(&format!("adp.res{level}.{conv}.w")), b.param(&format!("adp.res{level}.{conv}.b")));
        h = b.graph.relu(h);
        let cols = b.graph.gather(h, idx.clone());
        h = b.graph.linear(cols, w, Some(bias));
    }
    b.graph.add(x, h)
}

/// Per-level adapter features on the binder's graph for one `(42, H, W)` slice.
pub fn adapter_forward_graph(b: &mut Binder, cfg: &HditConfig, atlas_slice: &[f64]) -> Result<[Var; LEVELS]> {
    let (h, w, r) = (cfg.image_height, cfg.image_width, cfg.patch_size);
    if atlas_slice.len() != TRACT_CHANNELS * h * w {
        return Err(Error::Config(format!(
            "atlas slice has {} values, denoiser expects {TRACT_CHANNELS}x{h}x{w}",
            atlas_slice.len()
        )));
    }
    let unshuffled = pixel_unshuffle(atlas_slice, TRACT_CHANNELS, h, w, r)?;
    let (gh, gw) = cfg.grid(0);
    let feat = TRACT_CHANNELS * r * r;
    // channels-first -> token rows
    let mut tokens = vec![0.0; gh * gw * feat];
    for ch in 0..feat {
        for p in 0..gh * gw {
            tokens[p * feat + ch] = unshuffled[ch * gh * gw + p];
        }
    }
    let input = b.graph.constant(Tensor::new(gh * gw, feat, tokens));
    let (sw, sb) = (b.param("adp.stem.w"), b.param("adp.stem.b"));
    let mut x = b.graph.linear(input, sw, Some(sb));
    let mut outs = Vec::with_capacity(LEVELS);
    for level in 0..LEVELS {
        let grid = cfg.grid(level);
        if level > 0 {
            let (ph, pw) = cfg.grid(level - 1);
            let c = b.graph.value(x).cols;
            let merged = b.graph.gather(x, Arc::new(space_to_depth_index(ph, pw, c)));
            let (dw, db) = (b.param(&format!("adp.down{}.w", level - 1)), b.param(&format!("adp.down{}.b", level - 1)));
            x = b.graph.linear(merged, dw, Some(db));
        }
        x = resnet_block(b, x, grid, level);
        let (pw, pb) = (b.param(&format!("adp.proj{level}.w")), b.param(&format!("adp.proj{level}.b")));
        outs.push(b.graph.linear(x, pw, Some(pb)));
    }
    Ok([outs[0], outs[1], outs[2]])
}

pub fn adapter_forward(params: &ParamStore, cfg: &HditConfig, atlas_slice: &[f64]) -> Result<AdapterFeatures> {
    let mut b = Binder::new(params);
    let vars = adapter_forward_graph(&mut b, cfg, atlas_slice)?;
    Ok(vars.map(|v| b.graph.value(v).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{self, CondConfig, ConditionBundle};
    use crate::denoiser::{self, predict_noise};
    use crate::volume_io::Image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn atlas_with(z: usize, h: usize, w: usize, fill: impl Fn(usize, usize, usize) -> f64) -> TractAtlas {
        let mut data = vec![0.0; TRACT_CHANNELS * z * h * w];
        for c in 0..TRACT_CHANNELS {
            for zi in 0..z {
                for p in 0..h * w {
                    data[(c * z + zi) * h * w + p] = fill(c, zi, p);
                }
            }
        }
        TractAtlas::new(Volume::new([TRACT_CHANNELS, z, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn enrichment_rules() {
        // slice 0 has one nonzero voxel in channel 5; slice 1 is empty
        let atlas = atlas_with(2, 2, 2, |c, z, p| if c == 5 && z == 0 && p == 3 { 0.7 } else { 0.0 });
        let b0 = Volume::new([1, 2, 2, 2], vec![3.0, 1.0, 2.0, 4.0, 0.0, 1.0, 1.0, 2.0]).unwrap();
        let out = enrich_empty_slices(&atlas, &b0, &EnrichmentConfig { xi: 1.0 }).unwrap();
        for c in 0..TRACT_CHANNELS {
            assert_eq!(out.volume.image(c, 0), atlas.volume.image(c, 0));
            assert_eq!(out.volume.image(c, 1).data, vec![0.0, 0.5, 0.5, 1.0]);
        }
        let off = enrich_empty_slices(&atlas, &b0, &EnrichmentConfig { xi: 0.0 }).unwrap();
        assert!(off.volume.image(7, 1).data.iter().all(|&v| v == 0.0));
        let bad = Volume::new([1, 1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(enrich_empty_slices(&atlas, &bad, &EnrichmentConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn unshuffle_shapes_and_inverse() {
        let x: Vec<f64> = (0..TRACT_CHANNELS * 64 * 64).map(|i| i as f64).collect();
        let y = pixel_unshuffle(&x, TRACT_CHANNELS, 64, 64, 4).unwrap();
        assert_eq!(y.len(), 672 * 16 * 16);
        assert_eq!(pixel_shuffle(&y, TRACT_CHANNELS, 16, 16, 4).unwrap(), x);
        assert_eq!(pixel_unshuffle(&x, TRACT_CHANNELS, 64, 64, 1).unwrap(), x);
        assert!(pixel_unshuffle(&x, TRACT_CHANNELS, 64, 64, 3).is_err());
        // channel-major within each cell
        let small: Vec<f64> = (0..4).map(f64::from).collect();
        assert_eq!(pixel_unshuffle(&small, 1, 2, 2, 2).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn forward_shapes_and_zero_init() {
        let cfg = HditConfig::default();
        let p = init_params(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let slice: Vec<f64> = (0..TRACT_CHANNELS * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let feats = adapter_forward(&p, &cfg, &slice).unwrap();
        assert_eq!(feats[0].shape(), (256, 64));
        assert_eq!(feats[1].shape(), (64, 128));
        assert_eq!(feats[2].shape(), (16, 256));
        assert!(feats.iter().all(|f| f.data.iter().all(|&v| v == 0.0)));
        assert_eq!(adapter_forward(&p, &cfg, &slice).unwrap(), feats);
        assert!(matches!(adapter_forward(&p, &cfg, &slice[..100]), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let cfg = HditConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            widths: [8, 16, 32],
            blocks_per_level: 1,
            bottleneck_blocks: 1,
            na_window: 3,
            head_dim: 8,
            cond_width: 8,
        };
        let cond = CondConfig { width: 8, ffn_blocks: 1, max_slices: 2 };
        let mut p = denoiser::init_params(&cfg, 1).unwrap();
        p.merge(conditioning::init_params(&cond, 1));
        let ap = init_params(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let slice: Vec<f64> = (0..TRACT_CHANNELS * 256).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Image::new(16, 16, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let bundle = ConditionBundle { t: 2, bvec: [0.0, 1.0, 0.0], bval: 1000.0, slice_index: 0 };
        let feats = adapter_forward(&ap, &cfg, &slice).unwrap();
        let with = predict_noise(&p, &cfg, &cond, &x, &bundle, Some(&feats)).unwrap();
        let without = predict_noise(&p, &cfg, &cond, &x, &bundle, None).unwrap();
        assert_eq!(with, without);
    }
}
