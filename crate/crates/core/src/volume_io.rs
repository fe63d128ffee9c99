//! On-disk containers and basic intensity handling.
//!
//! Volumes are stored in the DVOL container:
//!
//! ```text
//! offset  size  field
//! 0       6     magic  b"DVOL1\n"
//! 6       4     version (u32 LE, currently 1)
//! 10      16    dims C, Z, H, W (4 x u32 LE)
//! 26      1     dtype tag (0 = f32 LE)
//! 27      ...   payload, C-order (C, Z, H, W)
//! ```
//!
//! Gradient tables follow the FSL text layout: `bvals` is a single row of
//! b-values, `bvecs` is three rows holding the x, y and z components.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{shape_err, value_err, Error, Result};

pub const DVOL_MAGIC: &[u8; 6] = b"DVOL1\n";
pub const DVOL_VERSION: u32 = 1;
pub const DTYPE_F32_LE: u8 = 0;
const HEADER_LEN: usize = 6 + 4 + 16 + 1;

/// Number of channels in a tract atlas.
pub const TRACT_CHANNELS: usize = 42;

/// Intensity of padded background once images live in `[-1, 1]`.
pub const BACKGROUND: f64 = -1.0;

/// Tolerance on unit b-vector norms.
pub const BVEC_NORM_TOL: f64 = 1e-4;

/// Header of a DVOL file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeHeader {
    pub version: u32,
    pub dims: [usize; 4],
    pub dtype: u8,
}

/// Dense 4-D array `(C, Z, H, W)`. Held as f64 in memory, stored as f32 on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n = checked_len(dims)?;
        if n != data.len() {
            return shape_err(format!("dims {dims:?} need {n} values, got {}", data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        let n = checked_len(dims)?;
        Ok(Self { dims, data: vec![0.0; n] })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    fn plane_offset(&self, c: usize, z: usize) -> usize {
        (c * self.dims[1] + z) * self.plane_len()
    }

    /// Copy of one `(H, W)` plane.
    pub fn image(&self, c: usize, z: usize) -> Image {
        let off = self.plane_offset(c, z);
        let data = self.data[off..off + self.plane_len()].to_vec();
        Image { height: self.dims[2], width: self.dims[3], data }
    }

    pub fn set_image(&mut self, c: usize, z: usize, img: &Image) -> Result<()> {
        if img.height != self.dims[2] || img.width != self.dims[3] {
            return shape_err(format!(
                "image {}x{} does not fit volume plane {}x{}",
                img.height, img.width, self.dims[2], self.dims[3]
            ));
        }
        let off = self.plane_offset(c, z);
        self.data[off..off + img.data.len()].copy_from_slice(&img.data);
        Ok(())
    }
}

fn checked_len(dims: [usize; 4]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("dims must be positive, got {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))
}

/// Single 2-D image in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return shape_err(format!("{height}x{width} image needs {} values, got {}", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

pub fn write_dvol(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + volume.data.len() * 4);
    buf.extend_from_slice(DVOL_MAGIC);
    buf.extend_from_slice(&DVOL_VERSION.to_le_bytes());
    for &d in &volume.dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.push(DTYPE_F32_LE);
    for &v in &volume.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn parse_header(bytes: &[u8]) -> Result<VolumeHeader> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= DVOL_MAGIC.len() && &bytes[..DVOL_MAGIC.len()] == DVOL_MAGIC {
            return Err(Error::Truncation { expected: HEADER_LEN, found: bytes.len() });
        }
        return Err(Error::Format("missing DVOL magic".into()));
    }
    if &bytes[..6] != DVOL_MAGIC {
        return Err(Error::Format("missing DVOL magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(6);
    if version != DVOL_VERSION {
        return Err(Error::Format(format!("unsupported DVOL version {version}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32_at(10 + 4 * i) as usize;
    }
    let dtype = bytes[26];
    if dtype != DTYPE_F32_LE {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    checked_len(dims)?;
    Ok(VolumeHeader { version, dims, dtype })
}

pub fn decode_dvol(bytes: &[u8]) -> Result<Volume> {
    let header = parse_header(bytes)?;
    let n = checked_len(header.dims)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = n * 4;
    if payload.len() != expected {
        if payload.len() < expected {
            return Err(Error::Truncation { expected, found: payload.len() });
        }
        return Err(Error::Format(format!("{} trailing bytes after payload", payload.len() - expected)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Volume { dims: header.dims, data })
}

pub fn read_dvol(path: impl AsRef<Path>) -> Result<Volume> {
    decode_dvol(&fs::read(path)?)
}

/// One acquisition: b-value in s/mm² and gradient direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gradient {
    pub bval: f64,
    pub bvec: [f64; 3],
}

impl Gradient {
    pub fn is_b0(&self) -> bool {
        self.bval == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientTable {
    pub entries: Vec<Gradient>,
}

impl GradientTable {
    /// Builds a table, forcing b=0 vectors to zero and renormalizing the rest.
    pub fn from_pairs(bvals: &[f64], bvecs: &[[f64; 3]]) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::Format(format!("{} b-values but {} b-vectors", bvals.len(), bvecs.len())));
        }
        let mut entries = Vec::with_capacity(bvals.len());
        for (i, (&bval, v)) in bvals.iter().zip(bvecs).enumerate() {
            if !bval.is_finite() || bval < 0.0 || v.iter().any(|x| !x.is_finite()) {
                return value_err(format!("direction {i}: non-finite or negative entry"));
            }
            if bval == 0.0 {
                entries.push(Gradient { bval, bvec: [0.0; 3] });
                continue;
            }
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm == 0.0 {
                return value_err(format!("direction {i}: zero b-vector with b={bval}"));
            }
            entries.push(Gradient { bval, bvec: [v[0] / norm, v[1] / norm, v[2] / norm] });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bvals(&self) -> Vec<f64> {
        self.entries.iter().map(|g| g.bval).collect()
    }

    /// Distinct positive b-values in ascending order.
    pub fn shells(&self) -> Vec<f64> {
        let mut shells: Vec<f64> = self.entries.iter().map(|g| g.bval).filter(|&b| b > 0.0).collect();
        shells.sort_by(f64::total_cmp);
        shells.dedup();
        shells
    }

    pub fn b0_index(&self) -> Option<usize> {
        self.entries.iter().position(Gradient::is_b0)
    }
}

fn parse_rows(text: &str, what: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split_whitespace()
                .map(|tok| tok.parse::<f64>().map_err(|_| Error::Parse(format!("{what}: bad token {tok:?}"))))
                .collect()
        })
        .collect()
}

pub fn parse_gradients(bvals_text: &str, bvecs_text: &str) -> Result<GradientTable> {
    let bvals: Vec<f64> = parse_rows(bvals_text, "bvals")?.into_iter().flatten().collect();
    let rows = parse_rows(bvecs_text, "bvecs")?;
    if rows.len() != 3 {
        return Err(Error::Format(format!("bvecs must have 3 rows, found {}", rows.len())));
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) || n != bvals.len() {
        return Err(Error::Format(format!(
            "column mismatch: bvals {} vs bvecs {:?}",
            bvals.len(),
            rows.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let bvecs: Vec<[f64; 3]> = (0..n).map(|j| [rows[0][j], rows[1][j], rows[2][j]]).collect();
    GradientTable::from_pairs(&bvals, &bvecs)
}

pub fn read_gradients(bvals_path: impl AsRef<Path>, bvecs_path: impl AsRef<Path>) -> Result<GradientTable> {
    parse_gradients(&fs::read_to_string(bvals_path)?, &fs::read_to_string(bvecs_path)?)
}

fn fmt_num(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v}")
}

pub fn format_gradients(table: &GradientTable) -> (String, String) {
    let bvals = table.entries.iter().map(|g| fmt_num(g.bval)).collect::<Vec<_>>().join(" ");
    let bvecs = (0..3)
        .map(|k| table.entries.iter().map(|g| fmt_num(g.bvec[k])).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n");
    (bvals + "\n", bvecs + "\n")
}

pub fn write_gradients(bvals_path: impl AsRef<Path>, bvecs_path: impl AsRef<Path>, table: &GradientTable) -> Result<()> {
    let (bvals, bvecs) = format_gradients(table);
    fs::write(bvals_path, bvals)?;
    fs::write(bvecs_path, bvecs)?;
    Ok(())
}

/// Multi-direction stack of slices with its gradient table.
#[derive(Debug, Clone)]
pub struct DwiStack {
    pub volume: Volume,
    pub gradients: GradientTable,
}

impl DwiStack {
    pub fn new(volume: Volume, gradients: GradientTable) -> Result<Self> {
        if volume.dims()[0] != gradients.len() {
            return shape_err(format!(
                "volume has {} directions, gradient table {}",
                volume.dims()[0],
                gradients.len()
            ));
        }
        for (i, g) in gradients.entries.iter().enumerate() {
            let n = g.bvec.iter().map(|x| x * x).sum::<f64>().sqrt();
            let ok = if g.is_b0() { g.bvec == [0.0; 3] } else { (n - 1.0).abs() <= BVEC_NORM_TOL };
            if !ok {
                return value_err(format!("direction {i}: b-vector norm {n} violates table invariant"));
            }
        }
        Ok(Self { volume, gradients })
    }

    pub fn directions(&self) -> usize {
        self.volume.dims()[0]
    }

    pub fn slice_count(&self) -> usize {
        self.volume.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.volume.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.volume.dims()[3]
    }
}

/// 42-channel tract probability stack `(42, Z, H, W)`.
#[derive(Debug, Clone)]
pub struct TractAtlas {
    pub volume: Volume,
}

impl TractAtlas {
    pub fn new(volume: Volume) -> Result<Self> {
        if volume.dims()[0] != TRACT_CHANNELS {
            return shape_err(format!("atlas needs {TRACT_CHANNELS} channels, got {}", volume.dims()[0]));
        }
        if volume.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return value_err("atlas values must be finite and non-negative");
        }
        Ok(Self { volume })
    }

    pub fn slice_count(&self) -> usize {
        self.volume.dims()[1]
    }
}

/// Affine map of `[min, max]` onto `[lo, hi]`; constant input maps to the midpoint.
pub fn minmax_normalize(img: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if img.iter().any(|v| !v.is_finite()) {
        return value_err("minmax_normalize: non-finite input");
    }
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return value_err(format!("minmax_normalize: bad target [{lo}, {hi}]"));
    }
    let (min, max) = min_max(img);
    if img.is_empty() {
        return Ok(Vec::new());
    }
    if max == min {
        return Ok(vec![0.5 * (lo + hi); img.len()]);
    }
    let scale = (hi - lo) / (max - min);
    Ok(img.iter().map(|&v| (lo + (v - min) * scale).clamp(lo, hi)).collect())
}

pub fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Centers `img` on a `target_h x target_w` canvas filled with [`BACKGROUND`].
/// Odd remainders put the extra row/column at the bottom/right.
pub fn pad_center(img: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h < img.height || target_w < img.width {
        return value_err(format!(
            "pad target {target_h}x{target_w} smaller than image {}x{}",
            img.height, img.width
        ));
    }
    let top = (target_h - img.height) / 2;
    let left = (target_w - img.width) / 2;
    let mut out = Image::filled(target_h, target_w, BACKGROUND);
    for r in 0..img.height {
        let dst = (top + r) * target_w + left;
        out.data[dst..dst + img.width].copy_from_slice(&img.data[r * img.width..(r + 1) * img.width]);
    }
    Ok(out)
}

/// Inverse of [`pad_center`].
pub fn center_crop(img: &Image, h: usize, w: usize) -> Result<Image> {
    if h > img.height || w > img.width {
        return value_err(format!("crop {h}x{w} larger than image {}x{}", img.height, img.width));
    }
    let top = (img.height - h) / 2;
    let left = (img.width - w) / 2;
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let src = (top + r) * img.width + left;
        data.extend_from_slice(&img.data[src..src + w]);
    }
    Ok(Image { height: h, width: w, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dvol_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dvol");
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| f64::from((i as f32 * 0.37).sin() * 1e3)).collect();
        let vol = Volume::new([2, 3, 4, 5], data).unwrap();
        write_dvol(&path, &vol).unwrap();
        let back = read_dvol(&path).unwrap();
        assert_eq!(back.dims(), vol.dims());
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&vol));
    }

    #[test]
    fn dvol_truncated_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(DVOL_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for d in [1u32, 1, 2, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.push(0);
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_dvol(&bytes), Err(Error::Truncation { expected: 16, found: 12 })));
    }

    #[test]
    fn dvol_bad_magic_and_overflow() {
        assert!(matches!(decode_dvol(b"NOTDVOL......................"), Err(Error::Format(_))));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(DVOL_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        bytes.push(0);
        assert!(matches!(decode_dvol(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn dvol_full_scale_header() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(DVOL_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for d in [90u32, 110, 256, 256] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.push(0);
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.dims, [90, 110, 256, 256]);
        // header-only buffer is a truncation, not a format error
        assert!(matches!(decode_dvol(&bytes), Err(Error::Truncation { expected, found: 0 }) if expected == 90 * 110 * 256 * 256 * 4));
    }

    #[test]
    fn gradients_parse_and_normalize() {
        let t = parse_gradients("0 1000\n", "0 1\n0 0\n0 0\n").unwrap();
        assert_eq!(t.entries[0], Gradient { bval: 0.0, bvec: [0.0; 3] });
        assert_eq!(t.entries[1], Gradient { bval: 1000.0, bvec: [1.0, 0.0, 0.0] });

        let t = parse_gradients("1000", "2\n0\n0").unwrap();
        assert_eq!(t.entries[0].bvec, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn gradients_errors() {
        assert!(matches!(parse_gradients("0 1000", "0 1\n0 0\n"), Err(Error::Format(_))));
        assert!(matches!(parse_gradients("0 1000 5", "0 1\n0 0\n0 0"), Err(Error::Format(_))));
        assert!(matches!(parse_gradients("0 abc", "0 1\n0 0\n0 0"), Err(Error::Parse(_))));
    }

    #[test]
    fn gradients_text_round_trip() {
        let t = parse_gradients("0 1000 2000", "0 0.6 0\n0 0.8 0\n0 0 1").unwrap();
        let (a, b) = format_gradients(&t);
        assert_eq!(parse_gradients(&a, &b).unwrap(), t);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0], 0.0, 1.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(minmax_normalize(&[2.0, 4.0], -1.0, 1.0).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(minmax_normalize(&[7.0; 5], -1.0, 1.0).unwrap(), vec![0.0; 5]);
        assert!(matches!(minmax_normalize(&[1.0, f64::NAN], 0.0, 1.0), Err(Error::Value(_))));
        assert!(matches!(minmax_normalize(&[1.0, f64::INFINITY], 0.0, 1.0), Err(Error::Value(_))));
    }

    #[test]
    fn pad_examples() {
        let img = Image::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pad_center(&img, 4, 4).unwrap();
        assert_eq!(p.at(1, 1), 1.0);
        assert_eq!(p.at(2, 2), 4.0);
        assert_eq!(p.at(0, 0), BACKGROUND);
        assert_eq!(p.at(3, 3), BACKGROUND);

        let img = Image::new(3, 3, (0..9).map(f64::from).collect()).unwrap();
        let p = pad_center(&img, 4, 4).unwrap();
        assert_eq!(p.at(0, 0), 0.0);
        assert_eq!(p.at(2, 2), 8.0);
        assert_eq!(p.at(3, 3), BACKGROUND);
        assert_eq!(p.at(0, 3), BACKGROUND);

        let img = Image::new(64, 64, (0..4096).map(f64::from).collect()).unwrap();
        assert_eq!(pad_center(&img, 64, 64).unwrap(), img);

        assert!(matches!(pad_center(&img, 32, 64), Err(Error::Value(_))));
    }

    #[test]
    fn stack_rejects_bad_bvecs() {
        let vol = Volume::zeros([2, 1, 2, 2]).unwrap();
        let table = GradientTable {
            entries: vec![
                Gradient { bval: 0.0, bvec: [0.0; 3] },
                Gradient { bval: 1000.0, bvec: [0.5, 0.0, 0.0] },
            ],
        };
        assert!(DwiStack::new(vol.clone(), table).is_err());
        let table = GradientTable::from_pairs(&[0.0], &[[0.0; 3]]).unwrap();
        assert!(matches!(DwiStack::new(vol, table), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-1e3f64..1e3, 2..64)) {
            let once = minmax_normalize(&v, -1.0, 1.0).unwrap();
            let twice = minmax_normalize(&once, -1.0, 1.0).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-7);
                prop_assert!((-1.0..=1.0).contains(a));
            }
        }

        #[test]
        fn pad_then_crop_recovers(h in 1usize..9, w in 1usize..9, dh in 0usize..5, dw in 0usize..5, seed in any::<u64>()) {
            let data: Vec<f64> = (0..h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
            let img = Image::new(h, w, data).unwrap();
            let padded = pad_center(&img, h + dh, w + dw).unwrap();
            prop_assert_eq!(center_crop(&padded, h, w).unwrap(), img);
        }
    }
}
