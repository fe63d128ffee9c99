//! SSIM / PSNR, error maps and evaluation reports.
//!
//! `ssim` and `psnr` take images already on a unit dynamic range. The
//! evaluation harness first rescales each (prediction, reference) pair with
//! the reference's min/max, so the reference anchors the scale.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::volume_io::{min_max, Image};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PSNR_CAP: f64 = 100.0;

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return shape_err(format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width));
    }
    Ok(())
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering; output is `(h − k + 1) x (w − k + 1)`.
fn filter(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM (Gaussian window 11, σ 1.5, `L = 1`). Images smaller
/// than the window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let (h, w) = (a.height, a.width);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return shape_err("empty image");
    }
    let k = gaussian_window(size);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter(&a.data, h, w, &k);
    let mu_b = filter(&b.data, h, w, &k);
    let aa = filter(&prod(&a.data, &a.data), h, w, &k);
    let bb = filter(&prod(&b.data, &b.data), h, w, &k);
    let ab = filter(&prod(&a.data, &b.data), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Rescales both images with the reference's min/max.
pub fn rescale_pair(pred: &Image, reference: &Image) -> Result<(Image, Image)> {
    check(pred, reference)?;
    let (lo, hi) = min_max(&reference.data);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let f = |img: &Image| Image { height: img.height, width: img.width, data: img.data.iter().map(|v| (v - lo) / range).collect() };
    Ok((f(pred), f(reference)))
}

/// `(SSIM %, PSNR dB)` of a prediction against its reference.
pub fn evaluate_pair(pred: &Image, reference: &Image) -> Result<(f64, f64)> {
    let (p, r) = rescale_pair(pred, reference)?;
    Ok((100.0 * ssim(&p, &r)?, psnr(&p, &r)?))
}

/// `|a − b|` rescaled so the largest difference is 1.
pub fn error_map(a: &Image, b: &Image) -> Result<Image> {
    check(a, b)?;
    let diff: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).collect();
    let max = diff.iter().copied().fold(0.0, f64::max);
    let data = if max > 0.0 { diff.into_iter().map(|d| d / max).collect() } else { diff };
    Image::new(a.height, a.width, data)
}

/// Binary PGM (`P5`, maxval 255) of an image in `[0, 1]`.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pgm(img))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub bval: f64,
    pub ssim_pct: f64,
    pub psnr_db: f64,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl Aggregate {
    pub fn of(rows: &[&EvalRow]) -> Self {
        let s: Vec<f64> = rows.iter().map(|r| r.ssim_pct).collect();
        let p: Vec<f64> = rows.iter().map(|r| r.psnr_db).collect();
        let (ssim_mean, ssim_std) = mean_std(&s);
        let (psnr_mean, psnr_std) = mean_std(&p);
        Self { n: rows.len(), ssim_mean, ssim_std, psnr_mean, psnr_std }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// One (prediction, reference) pair to score.
pub struct EvalPair<'a> {
    pub label: String,
    pub bval: f64,
    pub pred: &'a Image,
    pub reference: &'a Image,
}

impl EvalReport {
    /// Scores pairs in parallel; rows keep input order.
    pub fn from_pairs(pairs: &[EvalPair]) -> Result<Self> {
        let rows = pairs
            .par_iter()
            .map(|p| {
                let (s, q) = evaluate_pair(p.pred, p.reference)?;
                Ok(EvalRow { label: p.label.clone(), bval: p.bval, ssim_pct: s, psnr_db: q })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    /// Per b-value aggregates, keyed by the b-value rounded to an integer.
    pub fn by_bval(&self) -> BTreeMap<i64, Aggregate> {
        let mut groups: BTreeMap<i64, Vec<&EvalRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.bval.round() as i64).or_default().push(r);
        }
        groups.into_iter().map(|(b, rows)| (b, Aggregate::of(&rows))).collect()
    }

    /// Pooled over all b-values.
    pub fn pooled(&self) -> Option<Aggregate> {
        if self.rows.is_empty() {
            return None;
        }
        Some(Aggregate::of(&self.rows.iter().collect::<Vec<_>>()))
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("image,bval,ssim_pct,psnr_db\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", r.label, r.bval, r.ssim_pct, r.psnr_db);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("group,n,ssim_mean,ssim_std,psnr_mean,psnr_std\n");
        let mut line = |g: String, a: Aggregate| {
            let _ = writeln!(s, "{g},{},{:.6},{:.6},{:.6},{:.6}", a.n, a.ssim_mean, a.ssim_std, a.psnr_mean, a.psnr_std);
        };
        for (b, a) in self.by_bval() {
            line(format!("b{b}"), a);
        }
        if let Some(a) = self.pooled() {
            line("all".into(), a);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn ssim_closed_forms() {
        let x = random(24, 20, 1);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let a = Image::filled(16, 16, 0.4);
        let b = Image::filled(16, 16, 0.6);
        let expected = (2.0 * 0.24 + 1e-4) / (0.16 + 0.36 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.92310).abs() < 1e-4);
        let y = random(24, 20, 2);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!(matches!(ssim(&x, &random(20, 24, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(8, 8, 0.3);
        let b = Image::filled(8, 8, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let x = random(8, 8, 3);
        assert_eq!(psnr(&x, &a).unwrap(), psnr(&a, &x).unwrap());
    }

    #[test]
    fn error_map_and_pgm() {
        let a = random(5, 7, 4);
        let z = error_map(&a, &a).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        let b = random(5, 7, 5);
        let m = error_map(&a, &b).unwrap();
        let bytes = encode_pgm(&m);
        let header = b"P5\n7 5\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 35);
        assert_eq!(*bytes[header.len()..].iter().max().unwrap(), 255);
    }

    #[test]
    fn aggregates_recompute() {
        let imgs: Vec<Image> = (0..6).map(|i| random(12, 12, i)).collect();
        let pairs: Vec<EvalPair> = (0..5)
            .map(|i| EvalPair { label: format!("p{i}"), bval: if i % 2 == 0 { 1000.0 } else { 2000.0 }, pred: &imgs[i], reference: &imgs[i + 1] })
            .collect();
        let report = EvalReport::from_pairs(&pairs).unwrap();
        let g = report.by_bval();
        let b1: Vec<f64> = report.rows.iter().filter(|r| r.bval == 1000.0).map(|r| r.ssim_pct).collect();
        let m = b1.iter().sum::<f64>() / 3.0;
        let sd = (b1.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((g[&1000].ssim_mean - m).abs() < 1e-9 && (g[&1000].ssim_std - sd).abs() < 1e-9);
        assert_eq!(report.pooled().unwrap().n, 5);
        assert!(report.rows.iter().all(|r| (-100.0..=100.0).contains(&r.ssim_pct)));
        assert!(report.summary_csv().starts_with("group,n,"));
        assert_eq!(report.rows_csv().lines().count(), 6);
    }

    proptest! {
        #[test]
        fn affine_invariance(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let a = random(14, 14, seed);
            let b = random(14, 14, seed + 1);
            let f = |img: &Image| Image { height: 14, width: 14, data: img.data.iter().map(|v| v * scale + shift).collect() };
            let (s0, p0) = evaluate_pair(&a, &b).unwrap();
            let (s1, p1) = evaluate_pair(&f(&a), &f(&b)).unwrap();
            prop_assert!((s0 - s1).abs() < 1e-6);
            prop_assert!((p0 - p1).abs() < 1e-6);
        }
    }
}
