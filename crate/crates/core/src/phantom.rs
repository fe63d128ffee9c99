//! Synthetic multi-shell diffusion data from a single-tensor model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume_io::{DwiStack, GradientTable, TractAtlas, Volume, TRACT_CHANNELS};

pub const BACKGROUND_DIFFUSIVITY: f64 = 0.8e-3;
pub const TRACT_EIGENVALUES: [f64; 3] = [1.7e-3, 0.2e-3, 0.2e-3];

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub n_tracts: usize,
    pub shells: Vec<f64>,
    pub dirs_per_shell: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            slices: 16,
            height: 64,
            width: 64,
            n_tracts: 3,
            shells: vec![1000.0, 2000.0],
            dirs_per_shell: 16,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Spec(format!("grid {}x{}x{} too small", self.slices, self.height, self.width)));
        }
        if self.n_tracts > TRACT_CHANNELS {
            return Err(Error::Spec(format!("at most {TRACT_CHANNELS} tracts, got {}", self.n_tracts)));
        }
        if self.shells.is_empty() || self.shells.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Spec(format!("shells must be positive, got {:?}", self.shells)));
        }
        if self.dirs_per_shell < 6 {
            return Err(Error::Spec(format!("need >= 6 directions per shell, got {}", self.dirs_per_shell)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Symmetric tensor stored as `[xx, xy, xz, yy, yz, zz]`, in mm²/s.
pub type SymTensor = [f64; 6];

pub fn isotropic(d: f64) -> SymTensor {
    [d, 0.0, 0.0, d, 0.0, d]
}

/// `λ⊥ I + (λ∥ − λ⊥) t tᵀ` for a unit tangent `t`.
pub fn tract_tensor(tangent: [f64; 3]) -> SymTensor {
    let [l1, l2, _] = TRACT_EIGENVALUES;
    let [x, y, z] = tangent;
    let a = l1 - l2;
    [l2 + a * x * x, a * x * y, a * x * z, l2 + a * y * y, a * y * z, l2 + a * z * z]
}

/// `gᵀ D g`.
pub fn quadratic_form(d: &SymTensor, g: [f64; 3]) -> f64 {
    let [xx, xy, xz, yy, yz, zz] = *d;
    let [x, y, z] = g;
    xx * x * x + yy * y * y + zz * z * z + 2.0 * (xy * x * y + xz * x * z + yz * y * z)
}

pub fn apply(d: &SymTensor, v: [f64; 3]) -> [f64; 3] {
    let [xx, xy, xz, yy, yz, zz] = *d;
    [xx * v[0] + xy * v[1] + xz * v[2], xy * v[0] + yy * v[1] + yz * v[2], xz * v[0] + yz * v[1] + zz * v[2]]
}

/// Per-voxel tensors and tract labels on a `(Z, H, W)` grid. Label 0 is
/// background; `k > 0` is tract `k`. Vector components are `(x, y, z) =
/// (column, row, slice)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub dims: [usize; 3],
    pub tensors: Vec<SymTensor>,
    pub labels: Vec<u8>,
}

/// Quadratic Bézier centreline of a tube, control points in `(x, y, z)` voxel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TractCurve {
    pub control: [[f64; 3]; 3],
    pub radius: f64,
}

impl TractCurve {
    pub fn point(&self, s: f64) -> [f64; 3] {
        let [p0, p1, p2] = self.control;
        let (a, b, c) = ((1.0 - s) * (1.0 - s), 2.0 * (1.0 - s) * s, s * s);
        [0, 1, 2].map(|k| a * p0[k] + b * p1[k] + c * p2[k])
    }

    pub fn tangent(&self, s: f64) -> [f64; 3] {
        let [p0, p1, p2] = self.control;
        let d = [0, 1, 2].map(|k| 2.0 * (1.0 - s) * (p1[k] - p0[k]) + 2.0 * s * (p2[k] - p1[k]));
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        d.map(|v| v / n)
    }
}

const CURVE_SAMPLES: usize = 256;

/// Ellipsoidal head mask; every slice keeps a non-empty cross-section.
pub fn head_mask(dims: [usize; 3]) -> Vec<bool> {
    let [z, h, w] = dims;
    let zc = (z as f64 - 1.0) / 2.0;
    let (rc, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rz = 0.62 * z as f64;
    let mut mask = vec![false; z * h * w];
    for zi in 0..z {
        let shrink = (1.0 - ((zi as f64 - zc) / rz).powi(2)).max(0.0).sqrt();
        let (ry, rx) = (0.44 * h as f64 * shrink, 0.38 * w as f64 * shrink);
        for r in 0..h {
            for c in 0..w {
                let e = ((r as f64 - rc) / ry).powi(2) + ((c as f64 - cc) / rx).powi(2);
                mask[(zi * h + r) * w + c] = e <= 1.0;
            }
        }
    }
    mask
}

fn random_curves(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<TractCurve> {
    let (h, w, z) = (spec.height as f64, spec.width as f64, spec.slices as f64);
    let radius = (h.min(w) / 20.0).max(1.0);
    (0..spec.n_tracts)
        .map(|_| {
            // endpoints on opposite sides of the head, bowed through the middle
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (theta.cos(), theta.sin());
            let reach = 0.28 * h.min(w);
            let (cx, cy) = (w / 2.0 - 0.5 + rng.random_range(-0.08..0.08) * w, h / 2.0 - 0.5 + rng.random_range(-0.08..0.08) * h);
            let z0 = rng.random_range(0.25..0.75) * (z - 1.0);
            let z1 = rng.random_range(0.25..0.75) * (z - 1.0);
            let bow = rng.random_range(-0.15..0.15) * h.min(w);
            let p0 = [cx - reach * dx, cy - reach * dy, z0];
            let p2 = [cx + reach * dx, cy + reach * dy, z1];
            let p1 = [cx - bow * dy, cy + bow * dx, 0.5 * (z0 + z1)];
            TractCurve { control: [p0, p1, p2], radius }
        })
        .collect()
}

/// Rasterizes tubes into a field of background isotropic tensors.
pub fn rasterize(dims: [usize; 3], curves: &[TractCurve]) -> Result<TensorField> {
    if curves.len() > TRACT_CHANNELS {
        return Err(Error::Spec(format!("at most {TRACT_CHANNELS} tracts, got {}", curves.len())));
    }
    let [z, h, w] = dims;
    let bounds = [w as f64 - 1.0, h as f64 - 1.0, z as f64 - 1.0];
    let mut samples = Vec::with_capacity(curves.len());
    for (k, curve) in curves.iter().enumerate() {
        let pts: Vec<([f64; 3], [f64; 3])> = (0..=CURVE_SAMPLES)
            .map(|i| {
                let s = i as f64 / CURVE_SAMPLES as f64;
                (curve.point(s), curve.tangent(s))
            })
            .collect();
        for (p, _) in &pts {
            // in-plane extent must fit the grid; slices may clip
            if p[0] - curve.radius < 0.0
                || p[1] - curve.radius < 0.0
                || p[0] + curve.radius > bounds[0]
                || p[1] + curve.radius > bounds[1]
                || p[2] < 0.0
                || p[2] > bounds[2]
            {
                return Err(Error::Spec(format!("tract {k} leaves the {z}x{h}x{w} grid")));
            }
        }
        samples.push(pts);
    }
    let n = z * h * w;
    let mut tensors = vec![isotropic(BACKGROUND_DIFFUSIVITY); n];
    let mut labels = vec![0u8; n];
    for zi in 0..z {
        for r in 0..h {
            for c in 0..w {
                let v = [c as f64, r as f64, zi as f64];
                let idx = (zi * h + r) * w + c;
                for (k, (curve, pts)) in curves.iter().zip(&samples).enumerate() {
                    let (d2, tangent) = pts
                        .iter()
                        .map(|(p, t)| ((0..3).map(|a| (p[a] - v[a]).powi(2)).sum::<f64>(), *t))
                        .min_by(|a, b| a.0.total_cmp(&b.0))
                        .unwrap();
                    if d2 <= curve.radius * curve.radius {
                        tensors[idx] = tract_tensor(tangent);
                        labels[idx] = (k + 1) as u8;
                        break;
                    }
                }
            }
        }
    }
    Ok(TensorField { dims, tensors, labels })
}

/// Tensor field plus `S0` (1 inside the head mask, 0 outside), laid out `(1, Z, H, W)`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(TensorField, Volume)> {
    spec.validate()?;
    let dims = [spec.slices, spec.height, spec.width];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let curves = random_curves(spec, &mut rng);
    let mut field = rasterize(dims, &curves)?;
    let mask = head_mask(dims);
    // tracts only exist inside the head
    for (i, &inside) in mask.iter().enumerate() {
        if !inside {
            field.labels[i] = 0;
            field.tensors[i] = isotropic(BACKGROUND_DIFFUSIVITY);
        }
    }
    let s0 = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok((field, Volume::new([1, spec.slices, spec.height, spec.width], s0)?))
}

/// Tract masks as a 42-channel atlas; unused channels stay zero.
pub fn tract_atlas(field: &TensorField) -> Result<TractAtlas> {
    let [z, h, w] = field.dims;
    let n = z * h * w;
    let mut data = vec![0.0; TRACT_CHANNELS * n];
    for (i, &l) in field.labels.iter().enumerate() {
        if l > 0 {
            data[(l as usize - 1) * n + i] = 1.0;
        }
    }
    TractAtlas::new(Volume::new([TRACT_CHANNELS, z, h, w], data)?)
}

/// `S0 exp(−b gᵀDg)`, optionally with Rician corruption `√((S + n₁)² + n₂²)`.
pub fn simulate_signal(
    field: &TensorField,
    s0: &[f64],
    bval: f64,
    bvec: [f64; 3],
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let clean = field.tensors.iter().zip(s0).map(|(d, &s)| if bval == 0.0 { s } else { s * (-bval * quadratic_form(d, bvec)).exp() });
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        clean
            .map(|s| {
                let (n1, n2) = (normal.sample(rng), normal.sample(rng));
                ((s + n1).powi(2) + n2 * n2).sqrt()
            })
            .collect()
    } else {
        clean.collect()
    }
}

/// Quasi-uniform unit vectors on the sphere (Fibonacci lattice); `n = 1`
/// gives `(0, 0, 1)`.
pub fn sphere_directions(n: usize) -> Vec<[f64; 3]> {
    if n == 1 {
        return vec![[0.0, 0.0, 1.0]];
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let v = [r * phi.cos(), r * phi.sin(), z];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|x| x / norm)
        })
        .collect()
}

/// One b=0 volume followed by `dirs_per_shell` directions per shell.
pub fn gradient_table(spec: &PhantomSpec) -> Result<GradientTable> {
    let dirs = sphere_directions(spec.dirs_per_shell);
    let mut bvals = vec![0.0];
    let mut bvecs = vec![[0.0; 3]];
    for &b in &spec.shells {
        for d in &dirs {
            bvals.push(b);
            bvecs.push(*d);
        }
    }
    GradientTable::from_pairs(&bvals, &bvecs)
}

/// Full synthetic acquisition.
#[derive(Debug, Clone)]
pub struct PhantomData {
    pub field: TensorField,
    pub stack: DwiStack,
    pub atlas: TractAtlas,
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomData> {
    let (field, s0) = make_phantom(spec)?;
    let table = gradient_table(spec)?;
    let volumes: Vec<Vec<f64>> = table
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            simulate_signal(&field, s0.data(), g.bval, g.bvec, spec.noise_sigma, &mut rng)
        })
        .collect();
    let dims = [table.len(), spec.slices, spec.height, spec.width];
    let volume = Volume::new(dims, volumes.concat())?;
    let atlas = tract_atlas(&field)?;
    Ok(PhantomData { field, stack: DwiStack::new(volume, table)?, atlas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{estimate_adc_atlas, AdcForm};

    fn small_spec() -> PhantomSpec {
        PhantomSpec { slices: 4, height: 32, width: 32, dirs_per_shell: 8, ..PhantomSpec::default() }
    }

    #[test]
    fn no_tracts_is_isotropic() {
        let spec = PhantomSpec { n_tracts: 0, ..small_spec() };
        let (field, s0) = make_phantom(&spec).unwrap();
        assert!(field.tensors.iter().all(|t| *t == isotropic(BACKGROUND_DIFFUSIVITY)));
        assert!(field.labels.iter().all(|&l| l == 0));
        assert!(s0.data().iter().any(|&v| v == 1.0));
        for z in 0..spec.slices {
            assert!(s0.image(0, z).data.iter().any(|&v| v == 1.0), "slice {z} has no head");
        }
    }

    #[test]
    fn straight_tract_along_x() {
        let curve = TractCurve { control: [[4.0, 8.0, 1.0], [8.0, 8.0, 1.0], [12.0, 8.0, 1.0]], radius: 1.5 };
        let field = rasterize([3, 16, 16], &[curve]).unwrap();
        let idx = (16 + 8) * 16 + 8;
        assert_eq!(field.labels[idx], 1);
        let d = field.tensors[idx];
        let e = apply(&d, [1.0, 0.0, 0.0]);
        assert!((e[0] - 1.7e-3).abs() < 1e-18 && e[1] == 0.0 && e[2] == 0.0);
        assert!((quadratic_form(&d, [0.0, 1.0, 0.0]) - 0.2e-3).abs() < 1e-18);
        // symmetric storage, eigenvalues bounded
        assert!(d.iter().all(|&v| (0.0..=4e-3).contains(&v.abs())));
    }

    #[test]
    fn tract_leaving_grid_is_rejected() {
        let curve = TractCurve { control: [[-4.0, 8.0, 1.0], [8.0, 8.0, 1.0], [12.0, 8.0, 1.0]], radius: 1.5 };
        assert!(matches!(rasterize([3, 16, 16], &[curve]), Err(Error::Spec(_))));
        let spec = PhantomSpec { n_tracts: 43, ..small_spec() };
        assert!(matches!(make_phantom(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn phantom_is_deterministic_and_has_tracts() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.field, b.field);
        assert_eq!(a.stack.volume, b.stack.volume);
        assert!(a.field.labels.iter().any(|&l| l > 0));
        assert_eq!(a.atlas.volume.dims(), [42, 4, 32, 32]);
    }

    #[test]
    fn signal_examples() {
        let field = TensorField { dims: [1, 1, 2], tensors: vec![isotropic(1e-3), tract_tensor([1.0, 0.0, 0.0])], labels: vec![0, 1] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = simulate_signal(&field, &[1.0, 1.0], 1000.0, [0.0, 0.6, 0.8], 0.0, &mut rng);
        assert!((s[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((s[0] - 0.36788).abs() < 1e-5);
        let s = simulate_signal(&field, &[1.0, 1.0], 1000.0, [1.0, 0.0, 0.0], 0.0, &mut rng);
        assert!((s[1] - (-1.7f64).exp()).abs() < 1e-15);
        assert!((s[1] - 0.18268).abs() < 1e-5);
        let s = simulate_signal(&field, &[0.7, 0.3], 0.0, [0.0; 3], 0.0, &mut rng);
        assert_eq!(s, vec![0.7, 0.3]);
    }

    #[test]
    fn signal_decreases_with_b() {
        let field = TensorField { dims: [1, 1, 1], tensors: vec![tract_tensor([0.6, 0.0, 0.8])], labels: vec![1] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = [0.0, 0.6, 0.8];
        let mut prev = f64::INFINITY;
        for b in [0.0, 500.0, 1000.0, 2000.0, 3000.0] {
            let s = simulate_signal(&field, &[1.0], b, g, 0.0, &mut rng)[0];
            assert!(s <= prev);
            prev = s;
        }
    }

    #[test]
    fn directions() {
        assert_eq!(sphere_directions(1), vec![[0.0, 0.0, 1.0]]);
        for n in 2..=90 {
            let d = sphere_directions(n);
            assert_eq!(d.len(), n);
            for v in &d {
                assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-12);
            }
            let min_angle = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| (d[i][0] * d[j][0] + d[i][1] * d[j][1] + d[i][2] * d[j][2]).clamp(-1.0, 1.0).acos())
                .fold(f64::INFINITY, f64::min);
            assert!(min_angle.to_degrees() > 10.0, "n={n}: {}", min_angle.to_degrees());
        }
        assert_eq!(sphere_directions(90).len(), 90);
    }

    #[test]
    fn noiseless_adc_closure() {
        let spec = PhantomSpec { n_tracts: 0, ..small_spec() };
        let (mut field, s0) = make_phantom(&spec).unwrap();
        field.tensors.iter_mut().for_each(|t| *t = isotropic(1e-3));
        let table = gradient_table(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // S0 = 1 everywhere so every voxel carries signal
        let ones = vec![1.0; s0.data().len()];
        let data: Vec<f64> = table.entries.iter().flat_map(|g| simulate_signal(&field, &ones, g.bval, g.bvec, 0.0, &mut rng)).collect();
        let stack = DwiStack::new(Volume::new([table.len(), 4, 32, 32], data).unwrap(), table).unwrap();
        let n = spec.dirs_per_shell as f64;
        let sum = estimate_adc_atlas(&stack, 1000.0, AdcForm::Sum).unwrap();
        let mean = estimate_adc_atlas(&stack, 1000.0, AdcForm::Mean).unwrap();
        for (&s, &m) in sum.values.iter().zip(&mean.values) {
            assert!((s - n * 1e-3).abs() / (n * 1e-3) <= 1e-10);
            assert!((m - 1e-3).abs() / 1e-3 <= 1e-10);
        }
    }

    #[test]
    fn zero_sigma_rician_is_identity() {
        let field = TensorField { dims: [1, 1, 3], tensors: vec![isotropic(1e-3); 3], labels: vec![0; 3] };
        let mut a = ChaCha8Rng::seed_from_u64(0);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        assert_eq!(
            simulate_signal(&field, &[1.0, 0.5, 0.0], 1000.0, [1.0, 0.0, 0.0], 0.0, &mut a),
            simulate_signal(&field, &[1.0, 0.5, 0.0], 1000.0, [1.0, 0.0, 0.0], 0.0, &mut b)
        );
        let noisy = simulate_signal(&field, &[1.0, 0.5, 0.0], 1000.0, [1.0, 0.0, 0.0], 0.05, &mut a);
        assert!(noisy.iter().all(|&v| v >= 0.0));
    }
}
