//! Gaussian random fields on the periodic unit square.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::fft::{freq, Fft2};

/// Covariance `amplitude · (c|k|² + shift)^(−exponent)` of the Fourier
/// coefficient at integer wavevector `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    pub shift: f64,
    pub exponent: f64,
    pub amplitude: f64,
    /// Use the Laplacian eigenvalue `4π²|k|²`; when false, plain `|k|²`.
    pub angular: bool,
    /// Force the `k = 0` coefficient to zero.
    pub zero_mean: bool,
}

impl Default for GrfSpec {
    fn default() -> Self {
        GrfSpec { shift: 49.0, exponent: 2.5, amplitude: 7f64.powf(1.5), angular: true, zero_mean: false }
    }
}

impl GrfSpec {
    pub fn eigenvalue(&self, kx: isize, ky: isize) -> f64 {
        let k2 = (kx * kx + ky * ky) as f64;
        let c = if self.angular { 4.0 * PI * PI } else { 1.0 };
        self.amplitude * (c * k2 + self.shift).powf(-self.exponent)
    }

    /// Variance of the coefficient stored in FFT bin `(i, j)` of an `h×w` grid.
    pub fn mode_variance(&self, i: usize, j: usize, h: usize, w: usize) -> f64 {
        if self.zero_mean && i == 0 && j == 0 {
            return 0.0;
        }
        self.eigenvalue(freq(i, h), freq(j, w))
    }

    fn check(&self) {
        assert!(self.amplitude > 0.0, "GRF amplitude must be positive");
        // The 2D spectrum is summable only for exponent > d/2 = 1.
        assert!(self.exponent > 1.0, "GRF exponent must exceed 1 in two dimensions");
    }
}

/// Hermitian-symmetric coefficients `c_k` with `E|c_k|² = λ_k`, laid out in
/// FFT bin order. Sampled by colouring the transform of real white noise.
pub fn grf_coefficients(spec: &GrfSpec, h: usize, w: usize, rng: &mut impl Rng) -> Vec<Complex64> {
    spec.check();
    let n = (h * w) as f64;
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let fft = Fft2::cached(h, w);
    let mut c = fft.forward_real(&noise);
    for i in 0..h {
        for j in 0..w {
            c[i * w + j] *= (spec.mode_variance(i, j, h, w) / n).sqrt();
        }
    }
    c
}

/// One real field sample `w(x) = Σ_k c_k e^{2πi k·x}` on an `h×w` grid.
pub fn sample_grf(spec: &GrfSpec, h: usize, w: usize, rng: &mut impl Rng) -> Array2<f64> {
    assert!(h % 2 == 0 && w % 2 == 0, "GRF grid must be even-sized, got {h}x{w}");
    let mut c = grf_coefficients(spec, h, w, rng);
    Fft2::cached(h, w).inverse(&mut c);
    Array2::from_shape_vec((h, w), c.iter().map(|v| v.re).collect()).expect("grid shape")
}
