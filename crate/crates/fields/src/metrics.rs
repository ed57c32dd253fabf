//! Frame-level error metrics. Frames are `[C, H, W]`; spectral quantities use
//! the unitary 2D transform per channel so Parseval holds exactly.

use ndarray::{ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{FieldsError, Result};
use crate::fft::Fft2;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DENSITY_BINS: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub spectral_mse: f64,
    pub rfne: f64,
    /// Infinite (serialized as `null`) when the prediction is exact.
    pub psnr: f64,
    pub pearson: f64,
    pub ssim: f64,
    /// Mean squared difference of 64-bin value histograms. A placeholder
    /// definition; not a standard metric.
    pub density_mse: f64,
}

impl MetricReport {
    /// Field-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            mse: avg(|r| r.mse),
            spectral_mse: avg(|r| r.spectral_mse),
            rfne: avg(|r| r.rfne),
            psnr: avg(|r| r.psnr),
            pearson: avg(|r| r.pearson),
            ssim: avg(|r| r.ssim),
            density_mse: avg(|r| r.density_mse),
        })
    }
}

fn check_pair(pred: &ArrayView3<f64>, truth: &ArrayView3<f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(FieldsError::Shape(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    if pred.is_empty() {
        return Err(FieldsError::Shape("empty frame".into()));
    }
    if pred.iter().chain(truth.iter()).any(|v| !v.is_finite()) {
        return Err(FieldsError::NonFinite { what: "in metric input".into() });
    }
    Ok(())
}

pub fn mse(pred: &ArrayView3<f64>, truth: &ArrayView3<f64>) -> f64 {
    pred.iter().zip(truth.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64
}

/// Mean of `|P̂ − T̂|²` over all channels and modes, unitary transform.
pub fn spectral_mse(pred: &ArrayView3<f64>, truth: &ArrayView3<f64>) -> f64 {
    let (c, h, w) = pred.dim();
    let fft = Fft2::cached(h, w);
    let mut acc = 0.0;
    for ch in 0..c {
        let p = fft.unitary(&pred.index_axis(Axis(0), ch).iter().cloned().collect::<Vec<_>>());
        let t = fft.unitary(&truth.index_axis(Axis(0), ch).iter().cloned().collect::<Vec<_>>());
        acc += p.iter().zip(&t).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
    }
    acc / (c * h * w) as f64
}

pub fn rfne(pred: &ArrayView3<f64>, truth: &ArrayView3<f64>) -> Result<f64> {
    let den = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(FieldsError::Degenerate("RFNE undefined for an all-zero truth frame".into()));
    }
    let num = pred.iter().zip(truth.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(num / den)
}

fn range(x: &ArrayView3<f64>) -> f64 {
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    hi - lo
}

/// `10 log10(range² / mse)` with the range of the truth frame.
pub fn psnr(pred: &ArrayView3<f64>, truth: &ArrayView3<f64>) -> f64 {
    let m = mse(pred, truth);
    let r = range(truth);
    if m == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (r * r / m).log10()
}

/// Pearson correlation of the flattened fields. A constant prediction has
/// zero correlation; a constant truth is an error.
pub fn pearson(pred: &ArrayView3<f64>, truth: &ArrayView3<f64>) -> Result<f64> {
    pearson_slices(pred.iter().cloned(), truth.iter().cloned())
}

pub fn pearson_slices(pred: impl Iterator<Item = f64>, truth: impl Iterator<Item = f64>) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = pred.zip(truth).collect();
    let n = pairs.len() as f64;
    let mp = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mt = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in &pairs {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vt == 0.0 {
        return Err(FieldsError::Degenerate("Pearson correlation undefined for a constant truth frame".into()));
    }
    if vp == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (vp * vt).sqrt()).clamp(-1.0, 1.0))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..k).map(|t| g[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..k).map(|t| g[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM of one channel with a 7×7 Gaussian window (σ = 1.5).
pub fn ssim_2d(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>, data_range: f64) -> Result<f64> {
    let (h, w) = truth.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FieldsError::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let x: Vec<f64> = pred.iter().cloned().collect();
    let y: Vec<f64> = truth.iter().cloned().collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let (mx, _, _) = filter_valid(&x, h, w, &g);
    let (my, _, _) = filter_valid(&y, h, w, &g);
    let (sxx, _, _) = filter_valid(&xx, h, w, &g);
    let (syy, _, _) = filter_valid(&yy, h, w, &g);
    let (sxy, _, _) = filter_valid(&xy, h, w, &g);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut acc = 0.0;
    for p in 0..mx.len() {
        let (a, b) = (mx[p], my[p]);
        let vx = sxx[p] - a * a;
        let vy = syy[p] - b * b;
        let cxy = sxy[p] - a * b;
        acc += ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(acc / mx.len() as f64)
}

/// SSIM averaged over channels, using the truth frame's dynamic range
/// (or 1 when the truth is constant).
pub fn ssim(pred: &ArrayView3<f64>, truth: &ArrayView3<f64>) -> Result<f64> {
    let r = range(truth);
    let r = if r > 0.0 { r } else { 1.0 };
    let c = truth.dim().0;
    let mut acc = 0.0;
    for ch in 0..c {
        acc += ssim_2d(&pred.index_axis(Axis(0), ch), &truth.index_axis(Axis(0), ch), r)?;
    }
    Ok(acc / c as f64)
}

/// Mean squared difference of normalized 64-bin histograms over the union
/// value range.
pub fn density_mse(pred: &ArrayView3<f64>, truth: &ArrayView3<f64>) -> f64 {
    let lo = pred.iter().chain(truth.iter()).cloned().fold(f64::INFINITY, f64::min);
    let hi = pred.iter().chain(truth.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    let hist = |x: &ArrayView3<f64>| {
        let mut hgram = vec![0.0; DENSITY_BINS];
        let n = x.len() as f64;
        for &v in x.iter() {
            let b = if hi > lo { (((v - lo) / (hi - lo)) * DENSITY_BINS as f64) as usize } else { 0 };
            hgram[b.min(DENSITY_BINS - 1)] += 1.0 / n;
        }
        hgram
    };
    let (hp, ht) = (hist(pred), hist(truth));
    hp.iter().zip(&ht).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / DENSITY_BINS as f64
}

pub fn compute_metrics(pred: &ArrayView3<f64>, truth: &ArrayView3<f64>) -> Result<MetricReport> {
    check_pair(pred, truth)?;
    Ok(MetricReport {
        mse: mse(pred, truth),
        spectral_mse: spectral_mse(pred, truth),
        rfne: rfne(pred, truth)?,
        psnr: psnr(pred, truth),
        pearson: pearson(pred, truth)?,
        ssim: ssim(pred, truth)?,
        density_mse: density_mse(pred, truth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn field(seed: f64) -> Array3<f64> {
        Array3::from_shape_fn((2, 9, 10), |(c, i, j)| ((i * 7 + j * 3 + c) as f64 * 0.37 + seed).sin())
    }

    #[test]
    fn identity_is_perfect() {
        let x = field(0.1);
        let r = compute_metrics(&x.view(), &x.view()).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.rfne, 0.0);
        assert_eq!(r.density_mse, 0.0);
        assert!(r.spectral_mse < 1e-28);
        assert!((r.pearson - 1.0).abs() < 1e-12);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert!(r.psnr.is_infinite());
    }

    #[test]
    fn constant_offset() {
        let x = field(0.3);
        let y = &x + 0.25;
        let r = compute_metrics(&y.view(), &x.view()).unwrap();
        assert!((r.pearson - 1.0).abs() < 1e-12);
        assert!((r.mse - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn degenerate_truths_error() {
        let z = Array3::<f64>::zeros((1, 8, 8));
        let x = field(0.0).slice(ndarray::s![0..1, 0..8, 0..8]).to_owned();
        assert!(matches!(rfne(&x.view(), &z.view()), Err(FieldsError::Degenerate(_))));
        assert!(matches!(pearson(&x.view(), &z.view()), Err(FieldsError::Degenerate(_))));
    }

    #[test]
    fn ssim_is_symmetric_in_structure_terms() {
        let (a, b) = (field(0.0), field(0.9));
        let s = ssim(&a.view(), &b.view()).unwrap();
        assert!(s < 1.0 && s > -1.0);
    }

    #[test]
    fn aggregate_is_fieldwise_mean() {
        let a = MetricReport { mse: 1.0, pearson: 0.5, ..Default::default() };
        let b = MetricReport { mse: 3.0, pearson: 1.0, ..Default::default() };
        let m = MetricReport::mean(&[a, b]).unwrap();
        assert_eq!(m.mse, 2.0);
        assert_eq!(m.pearson, 0.75);
        assert!(MetricReport::mean(&[]).is_none());
    }
}
