//! Radial energy spectra and L1-ball truncation diagnostics.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fft::{freq, Fft2};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Shell index `k = round(|k|)`.
    pub k: Vec<usize>,
    pub energy: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl SpectrumReport {
    fn from_energy(energy: Vec<f64>) -> Self {
        let total: f64 = energy.iter().sum();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = energy
            .iter()
            .map(|e| {
                acc += e;
                if total > 0.0 {
                    acc / total
                } else {
                    1.0
                }
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        SpectrumReport { k: (0..energy.len()).collect(), energy, cumulative }
    }

    pub fn total(&self) -> f64 {
        self.energy.iter().sum()
    }

    /// Cumulative fraction up to and including shell `k`.
    pub fn fraction_at(&self, k: usize) -> f64 {
        self.cumulative.get(k).copied().unwrap_or(1.0)
    }

    /// Shell-wise mean of spectra over the same grid size.
    pub fn mean(reports: &[SpectrumReport]) -> Option<SpectrumReport> {
        let first = reports.first()?;
        let mut e = vec![0.0; first.energy.len()];
        for r in reports {
            assert_eq!(r.energy.len(), e.len(), "spectra of different grids");
            for (a, b) in e.iter_mut().zip(&r.energy) {
                *a += b / reports.len() as f64;
            }
        }
        Some(Self::from_energy(e))
    }
}

fn shell(i: usize, j: usize, h: usize, w: usize) -> usize {
    let (a, b) = (freq(i, h) as f64, freq(j, w) as f64);
    (a * a + b * b).sqrt().round() as usize
}

fn max_shell(h: usize, w: usize) -> usize {
    let (a, b) = ((h / 2) as f64, (w / 2) as f64);
    (a * a + b * b).sqrt().round() as usize
}

fn accumulate(field: &ArrayView2<f64>, energy: &mut [f64]) {
    let (h, w) = field.dim();
    let x: Vec<f64> = field.iter().cloned().collect();
    let spec = Fft2::cached(h, w).unitary(&x);
    for i in 0..h {
        for j in 0..w {
            energy[shell(i, j, h, w)] += spec[i * w + j].norm_sqr();
        }
    }
}

/// `|F[field]|²` binned by radial shell; totals `Σ field²` by Parseval.
pub fn energy_spectrum(field: &ArrayView2<f64>) -> SpectrumReport {
    let (h, w) = field.dim();
    let mut energy = vec![0.0; max_shell(h, w) + 1];
    accumulate(field, &mut energy);
    SpectrumReport::from_energy(energy)
}

/// Spectrum of a `[C, H, W]` frame, summing channel energies.
pub fn energy_spectrum_frame(frame: &ArrayView3<f64>) -> SpectrumReport {
    let (_, h, w) = frame.dim();
    let mut energy = vec![0.0; max_shell(h, w) + 1];
    for f in frame.axis_iter(Axis(0)) {
        accumulate(&f, &mut energy);
    }
    SpectrumReport::from_energy(energy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationPoint {
    pub k_cut: usize,
    pub recon_mse: f64,
    pub spectral_mse: f64,
    pub energy_fraction: f64,
}

/// Keeps modes with `|kx| + |ky| ≤ k_cut`.
pub fn truncate(field: &ArrayView2<f64>, k_cut: usize) -> Array2<f64> {
    let (h, w) = field.dim();
    let fft = Fft2::cached(h, w);
    let x: Vec<f64> = field.iter().cloned().collect();
    let mut spec = fft.forward_real(&x);
    mask_l1(&mut spec, h, w, k_cut);
    Array2::from_shape_vec((h, w), fft.inverse_real(&spec)).expect("grid shape")
}

fn mask_l1(spec: &mut [Complex64], h: usize, w: usize, k_cut: usize) {
    for i in 0..h {
        for j in 0..w {
            if freq(i, h).unsigned_abs() + freq(j, w).unsigned_abs() > k_cut {
                spec[i * w + j] = Complex64::default();
            }
        }
    }
}

/// Reconstruction MSE, unitary spectral MSE and retained energy fraction
/// of the L1-ball truncation at `k_cut`.
pub fn truncation_analysis(field: &ArrayView2<f64>, k_cut: usize) -> TruncationPoint {
    let (h, w) = field.dim();
    let fft = Fft2::cached(h, w);
    let x: Vec<f64> = field.iter().cloned().collect();
    let full = fft.unitary(&x);
    let mut kept = full.clone();
    mask_l1(&mut kept, h, w, k_cut);
    let n = (h * w) as f64;
    let s = n.sqrt();
    let recon: Vec<f64> = fft.inverse_real(&kept.iter().map(|c| c * s).collect::<Vec<_>>());
    let recon_mse = x.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let spectral_mse = full.iter().zip(&kept).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / n;
    let total: f64 = full.iter().map(|c| c.norm_sqr()).sum();
    let retained: f64 = kept.iter().map(|c| c.norm_sqr()).sum();
    let energy_fraction = if total > 0.0 { retained / total } else { 1.0 };
    TruncationPoint { k_cut, recon_mse, spectral_mse, energy_fraction }
}

/// Truncation diagnostics for every `k_cut` from 0 to the largest L1 radius.
pub fn truncation_curve(field: &ArrayView2<f64>) -> Vec<TruncationPoint> {
    let (h, w) = field.dim();
    (0..=h / 2 + w / 2).map(|k| truncation_analysis(field, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn pure_mode_lands_in_its_shell() {
        let n = 16;
        let f = Array2::from_shape_fn((n, n), |(i, _)| (2.0 * PI * 3.0 * i as f64 / n as f64).cos());
        let r = energy_spectrum(&f.view());
        let total = r.total();
        assert!((r.energy[3] - total).abs() < 1e-10 * total);
        let sumsq: f64 = f.iter().map(|v| v * v).sum();
        assert!((total - sumsq).abs() < 1e-10 * sumsq);
    }

    #[test]
    fn full_cut_reconstructs() {
        let f = Array2::from_shape_fn((8, 6), |(i, j)| ((i * 5 + j * 3) as f64 * 0.41).sin());
        let p = truncation_analysis(&f.view(), 7);
        assert!(p.recon_mse < 1e-26);
        assert!((p.energy_fraction - 1.0).abs() < 1e-12);
        let t = truncate(&f.view(), 7);
        assert!(t.iter().zip(f.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
