//! Cached 2D FFT plans over row-major `H×W` grids.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward and inverse 2D transforms for one grid size.
///
/// Both directions are unnormalized, matching the usual `Σ x e^{∓2πi k·n/N}`
/// sums; helpers below apply the unitary or `1/(HW)` scalings explicitly.
pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Rc<Fft2>>> = RefCell::new(HashMap::new());
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        assert!(h > 0 && w > 0, "empty grid");
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    /// Shared plan for `h×w`, built once per thread.
    pub fn cached(h: usize, w: usize) -> Rc<Fft2> {
        PLANS.with(|p| p.borrow_mut().entry((h, w)).or_insert_with(|| Rc::new(Fft2::new(h, w))).clone())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn run(&self, buf: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.h, self.w);
        assert_eq!(buf.len() % (h * w), 0, "buffer is not a stack of {h}x{w} grids");
        let mut t = vec![Complex64::default(); h * w];
        for grid in buf.chunks_mut(h * w) {
            row.process(grid);
            for i in 0..h {
                for j in 0..w {
                    t[j * h + i] = grid[i * w + j];
                }
            }
            col.process(&mut t);
            for i in 0..h {
                for j in 0..w {
                    grid[i * w + j] = t[j * h + i];
                }
            }
        }
    }

    /// In-place unnormalized forward transform of one or more stacked grids.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// In-place unnormalized inverse transform of one or more stacked grids.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_inv, &self.col_inv);
    }

    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Unitary forward transform (scaled by `1/sqrt(HW)`).
    pub fn unitary(&self, x: &[f64]) -> Vec<Complex64> {
        let s = 1.0 / ((self.h * self.w) as f64).sqrt();
        let mut out = self.forward_real(x);
        for v in out.iter_mut() {
            *v *= s;
        }
        out
    }

    /// Inverse transform scaled by `1/(HW)`, keeping the real part.
    pub fn inverse_real(&self, spec: &[Complex64]) -> Vec<f64> {
        let mut buf = spec.to_vec();
        self.inverse(&mut buf);
        let s = 1.0 / (self.h * self.w) as f64;
        buf.iter().map(|c| c.re * s).collect()
    }
}

/// Signed integer frequency of FFT bin `i` on an axis of length `n`.
pub fn freq(i: usize, n: usize) -> isize {
    if i < n.div_ceil(2) {
        i as isize
    } else {
        i as isize - n as isize
    }
}

/// Bin index holding signed frequency `k`.
pub fn bin(k: isize, n: usize) -> usize {
    k.rem_euclid(n as isize) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequencies_follow_numpy_layout() {
        let f: Vec<isize> = (0..6).map(|i| freq(i, 6)).collect();
        assert_eq!(f, [0, 1, 2, -3, -2, -1]);
        let f: Vec<isize> = (0..5).map(|i| freq(i, 5)).collect();
        assert_eq!(f, [0, 1, 2, -2, -1]);
        for i in 0..6 {
            assert_eq!(bin(freq(i, 6), 6), i);
        }
    }

    #[test]
    fn roundtrip_and_single_mode() {
        let (h, w) = (4, 6);
        let fft = Fft2::new(h, w);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let back = fft.inverse_real(&fft.forward_real(&x));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        // cos(2π·1·i/h) lands in bins (1,0) and (h-1,0) with weight HW/2.
        let c: Vec<f64> = (0..h * w)
            .map(|p| (2.0 * std::f64::consts::PI * (p / w) as f64 / h as f64).cos())
            .collect();
        let s = fft.forward_real(&c);
        assert!((s[w].re - (h * w) as f64 / 2.0).abs() < 1e-9);
        assert!((s[(h - 1) * w].re - (h * w) as f64 / 2.0).abs() < 1e-9);
    }
}
