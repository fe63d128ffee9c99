//! Physics-guided noise evolution.
//!
//! The ADC atlas turns a shell's signal attenuation into a per-voxel decay
//! rate. Each voxel's retention factor `x = exp(-2 b D)` is min-max scaled to
//! `x̂ ∈ [0, 1]` and sets an exponent `w = 1 + κ (1 - x̂)` that is applied to
//! the base cumulative schedule: `phi_t(v) = ᾱ_t ^ w(v)`. Voxels that lose more
//! signal physically are noised faster; an uninformative atlas reproduces
//! the plain DDPM schedule exactly.

use crate::error::{shape_err, value_err, Result};
use crate::volume_io::DwiStack;

/// Signals are clamped to this floor before taking logarithms.
pub const SIGNAL_FLOOR: f64 = 1e-6;
pub const DEFAULT_KAPPA: f64 = 0.5;
pub const DEFAULT_DELTA: f64 = 1e-8;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// How per-direction ADCs are combined across a shell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdcForm {
    /// `Σᵢ Dⁱ`, the literal sum over directions.
    #[default]
    Sum,
    /// `Σᵢ Dⁱ / N`, the conventional mean ADC.
    Mean,
}

/// Per-voxel ADC map of one shell, laid out `(Z, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcAtlas {
    pub values: Vec<f64>,
    pub dims: [usize; 3],
    pub shell_bval: f64,
    pub n_directions: usize,
}

/// Directions whose b-value lies within 5% of `shell_bval`.
pub fn shell_directions(stack: &DwiStack, shell_bval: f64) -> Vec<usize> {
    stack
        .gradients
        .entries
        .iter()
        .enumerate()
        .filter(|(_, g)| g.bval > 0.0 && (g.bval - shell_bval).abs() <= 0.05 * shell_bval)
        .map(|(i, _)| i)
        .collect()
}

pub fn estimate_adc_atlas(stack: &DwiStack, shell_bval: f64, form: AdcForm) -> Result<AdcAtlas> {
    let dirs = shell_directions(stack, shell_bval);
    estimate_adc_atlas_from(stack, shell_bval, &dirs, form)
}

/// ADC atlas restricted to the given direction indices (e.g. a training split).
///
/// `D̃ = (N ln S₀ − Σᵢ ln Sⁱ) / b`, with signals floored at [`SIGNAL_FLOOR`]
/// and negative results clamped to zero. Multiple b=0 volumes are averaged.
pub fn estimate_adc_atlas_from(
    stack: &DwiStack,
    shell_bval: f64,
    directions: &[usize],
    form: AdcForm,
) -> Result<AdcAtlas> {
    if !(shell_bval > 0.0) || !shell_bval.is_finite() {
        return value_err(format!("shell b-value must be positive, got {shell_bval}"));
    }
    if directions.is_empty() {
        return value_err(format!("no directions at b={shell_bval}"));
    }
    let [c, z, h, w] = stack.volume.dims();
    let vox = z * h * w;
    let data = stack.volume.data();
    let b0s: Vec<usize> = (0..c).filter(|&i| stack.gradients.entries[i].is_b0()).collect();
    if b0s.is_empty() {
        return value_err("stack has no b=0 volume");
    }
    for &d in directions {
        if d >= c || stack.gradients.entries[d].is_b0() {
            return value_err(format!("direction {d} is not a diffusion-weighted volume"));
        }
    }
    let n = directions.len() as f64;
    let values = (0..vox)
        .map(|v| {
            let s0 = b0s.iter().map(|&i| data[i * vox + v]).sum::<f64>() / b0s.len() as f64;
            let log_s0 = s0.max(SIGNAL_FLOOR).ln();
            let log_sum: f64 = directions.iter().map(|&d| data[d * vox + v].max(SIGNAL_FLOOR).ln()).sum();
            let mut adc = (n * log_s0 - log_sum) / shell_bval;
            if form == AdcForm::Mean {
                adc /= n;
            }
            adc.max(0.0)
        })
        .collect();
    Ok(AdcAtlas { values, dims: [z, h, w], shell_bval, n_directions: directions.len() })
}

/// Linear β schedule and its cumulative products. Index `t - 1` holds step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseScheduleBase {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseScheduleBase {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t` with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

pub fn build_base_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseScheduleBase> {
    if steps == 0 {
        return value_err("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return value_err(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps).map(|i| beta_start + span * i as f64 / (steps - 1) as f64).collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseScheduleBase { betas, alphas, alpha_bars })
}

/// Per-voxel cumulative schedule `phi[t, v] = ᾱ_t ^ w(v)`.
///
/// The full `(T, Z, H, W)` table is never materialized; rows are computed on
/// demand from the per-voxel exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleMap {
    pub base: NoiseScheduleBase,
    pub exponents: Vec<f64>,
    pub dims: [usize; 3],
    pub kappa: f64,
    pub delta: f64,
    pub shell_bval: f64,
}

#[inline]
fn pow_exact(base: f64, exp: f64) -> f64 {
    if exp == 1.0 {
        base
    } else {
        base.powf(exp)
    }
}

impl ScheduleMap {
    /// Map that reproduces the scalar schedule at every voxel.
    pub fn uniform(base: NoiseScheduleBase, dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Self { base, exponents: vec![1.0; n], dims, kappa: 0.0, delta: DEFAULT_DELTA, shell_bval: 0.0 }
    }

    pub fn steps(&self) -> usize {
        self.base.steps()
    }

    fn plane(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    /// `phi[t, v]` for a flat `(Z, H, W)` voxel index; `t = 0` gives 1.
    pub fn phi(&self, t: usize, voxel: usize) -> f64 {
        pow_exact(self.base.alpha_bar(t), self.exponents[voxel])
    }

    /// `phi[t]` over one slice, row-major `(H, W)`.
    pub fn phi_slice(&self, t: usize, slice: usize) -> Vec<f64> {
        let ab = self.base.alpha_bar(t);
        let p = self.plane();
        self.exponents[slice * p..(slice + 1) * p].iter().map(|&w| pow_exact(ab, w)).collect()
    }

    pub fn phi_volume(&self, t: usize) -> Vec<f64> {
        let ab = self.base.alpha_bar(t);
        self.exponents.iter().map(|&w| pow_exact(ab, w)).collect()
    }
}

/// Retention factor `exp(-2 b D)` per voxel.
pub fn retention(atlas: &AdcAtlas) -> Vec<f64> {
    atlas.values.iter().map(|&d| (-2.0 * atlas.shell_bval * d).exp()).collect()
}

pub fn build_schedule_map(atlas: &AdcAtlas, base: &NoiseScheduleBase, kappa: f64, delta: f64) -> Result<ScheduleMap> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return value_err(format!("kappa must be finite and >= 0, got {kappa}"));
    }
    if !(delta > 0.0) {
        return value_err(format!("delta must be positive, got {delta}"));
    }
    let x = retention(atlas);
    let (lo, hi) = crate::volume_io::min_max(&x);
    let degenerate = hi - lo < delta;
    let exponents = x
        .iter()
        .map(|&xv| {
            let scaled = if degenerate { 1.0 } else { ((xv - lo) / (hi - lo + delta)).clamp(0.0, 1.0) };
            1.0 + kappa * (1.0 - scaled)
        })
        .collect();
    Ok(ScheduleMap {
        base: base.clone(),
        exponents,
        dims: atlas.dims,
        kappa,
        delta,
        shell_bval: atlas.shell_bval,
    })
}

#[inline]
fn mix(x0: f64, phi: f64, noise: f64) -> f64 {
    phi.sqrt() * x0 + (1.0 - phi).sqrt() * noise
}

/// `x_t = √phi ⊙ x0 + √(1 − phi) ⊙ noise`, elementwise.
pub fn forward_noise(x0: &[f64], phi: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != phi.len() || x0.len() != noise.len() {
        return shape_err(format!("forward_noise: lengths {} / {} / {}", x0.len(), phi.len(), noise.len()));
    }
    Ok(x0.iter().zip(phi).zip(noise).map(|((&x, &p), &n)| mix(x, p, n)).collect())
}

/// Scalar-schedule special case of [`forward_noise`].
pub fn forward_noise_ddpm(x0: &[f64], alpha_bar: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return shape_err(format!("forward_noise_ddpm: lengths {} / {}", x0.len(), noise.len()));
    }
    Ok(x0.iter().zip(noise).map(|(&x, &n)| mix(x, alpha_bar, n)).collect())
}
