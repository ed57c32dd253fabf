//! Truncated Fourier-space convolution and channel folding.
//!
//! A layer keeps the modes `|k_x| < m`, `0 ≤ k_y < m` of the 2D transform,
//! multiplies each by a learned complex `C_in × C_out` matrix and maps back
//! through a real inverse that treats the kept half-plane as one side of a
//! Hermitian spectrum. `m` is clamped to the largest value the grid resolves
//! without touching the Nyquist bins.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use tempo_fields::fft::{bin, Fft2};
use tempo_nn::{join, Module, Param, Tensor};

/// Largest usable mode count for an `h × w` grid.
pub fn max_modes(h: usize, w: usize) -> usize {
    h.div_ceil(2).min(w.div_ceil(2)).max(1)
}

/// Effective mode count after clamping a requested value to the grid.
pub fn effective_modes(requested: usize, h: usize, w: usize) -> usize {
    requested.max(1).min(max_modes(h, w))
}

/// Number of complex weights per `(C_in, C_out)` pair for mode count `m`.
pub fn retained_mode_count(m: usize) -> usize {
    (2 * m - 1) * m
}

#[derive(Clone, Copy, Debug)]
struct Mode {
    /// Index into the stored weight table.
    slot: usize,
    /// Flat bin of `(k_x, k_y)` in an `h × w` grid.
    pos: usize,
    /// Flat bin of `(-k_x, -k_y)`.
    neg: usize,
    half_plane: bool,
}

fn modes_for(m_store: usize, m_use: usize, h: usize, w: usize) -> Vec<Mode> {
    let mut out = Vec::new();
    for a in 0..2 * m_store - 1 {
        let kx = a as isize - (m_store as isize - 1);
        if kx.unsigned_abs() >= m_use {
            continue;
        }
        for ky in 0..m_use {
            let ky_i = ky as isize;
            out.push(Mode {
                slot: a * m_store + ky,
                pos: bin(kx, h) * w + bin(ky_i, w),
                neg: bin(-kx, h) * w + bin(-ky_i, w),
                half_plane: ky > 0,
            });
        }
    }
    out
}

/// Applies the truncated spectral convolution.
///
/// `x` is `[N, C_in, H, W]`; `wr`/`wi` hold real and imaginary weights laid
/// out `[2m-1, m, C_in, C_out]` with `k_x = a - (m-1)`.
pub fn spectral_conv2d(x: &Tensor, wr: &Tensor, wi: &Tensor, m_store: usize) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "spectral conv expects [N, C, H, W], got {s:?}");
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = wr.shape();
    assert_eq!(ws, wi.shape(), "real and imaginary weights differ in shape");
    assert_eq!(ws.len(), 4);
    assert_eq!((ws[0], ws[1], ws[2]), (2 * m_store - 1, m_store, cin), "weight table does not match input");
    let cout = ws[3];
    let hw = h * w;
    let m_use = m_store.min(max_modes(h, w));
    let modes = modes_for(m_store, m_use, h, w);
    let nm = modes.len();
    let fft = Fft2::cached(h, w);

    let mut spec: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut spec);
    // xm[mode][n][c]
    let mut xm = vec![Complex64::new(0.0, 0.0); nm * n * cin];
    for (mi, md) in modes.iter().enumerate() {
        for b in 0..n {
            for c in 0..cin {
                xm[(mi * n + b) * cin + c] = spec[(b * cin + c) * hw + md.pos];
            }
        }
    }
    drop(spec);

    let (wr_d, wi_d) = (wr.data(), wi.data());
    let weight = |slot: usize, c: usize, o: usize| {
        let i = (slot * cin + c) * cout + o;
        Complex64::new(wr_d[i], wi_d[i])
    };
    let mut out_spec = vec![Complex64::new(0.0, 0.0); n * cout * hw];
    let mut acc = vec![Complex64::new(0.0, 0.0); cout];
    for (mi, md) in modes.iter().enumerate() {
        for b in 0..n {
            acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for c in 0..cin {
                let xv = xm[(mi * n + b) * cin + c];
                for (o, a) in acc.iter_mut().enumerate() {
                    *a += xv * weight(md.slot, c, o);
                }
            }
            for (o, &y) in acc.iter().enumerate() {
                let base = (b * cout + o) * hw;
                if md.half_plane {
                    out_spec[base + md.pos] += y;
                    out_spec[base + md.neg] += y.conj();
                } else {
                    out_spec[base + md.pos] += 0.5 * y;
                    out_spec[base + md.neg] += 0.5 * y.conj();
                }
            }
        }
    }
    fft.inverse(&mut out_spec);
    let inv = 1.0 / hw as f64;
    let data: Vec<f64> = out_spec.iter().map(|c| c.re * inv).collect();

    let (wr_c, wi_c) = (wr.clone(), wi.clone());
    Tensor::from_op(
        data,
        vec![n, cout, h, w],
        vec![x.clone(), wr.clone(), wi.clone()],
        Box::new(move |g| {
            let fft = Fft2::cached(h, w);
            let mut gs: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.forward(&mut gs);
            let (wr_d, wi_d) = (wr_c.data(), wi_c.data());
            let mut gwr = vec![0.0; wr_d.len()];
            let mut gwi = vec![0.0; wi_d.len()];
            let mut gx_spec = vec![Complex64::new(0.0, 0.0); n * cin * hw];
            let mut gy = vec![Complex64::new(0.0, 0.0); cout];
            for (mi, md) in modes.iter().enumerate() {
                let c_k = if md.half_plane { 2.0 } else { 1.0 } * inv;
                for b in 0..n {
                    for (o, v) in gy.iter_mut().enumerate() {
                        *v = gs[(b * cout + o) * hw + md.pos] * c_k;
                    }
                    for c in 0..cin {
                        let xv = xm[(mi * n + b) * cin + c];
                        let xc = xv.conj();
                        let mut gxv = Complex64::new(0.0, 0.0);
                        let row = (md.slot * cin + c) * cout;
                        for o in 0..cout {
                            let wv = Complex64::new(wr_d[row + o], wi_d[row + o]);
                            let dw = xc * gy[o];
                            gwr[row + o] += dw.re;
                            gwi[row + o] += dw.im;
                            gxv += gy[o] * wv.conj();
                        }
                        gx_spec[(b * cin + c) * hw + md.pos] += gxv;
                    }
                }
            }
            fft.inverse(&mut gx_spec);
            let gx: Vec<f64> = gx_spec.iter().map(|c| c.re).collect();
            vec![Some(gx), Some(gwr), Some(gwi)]
        }),
    )
}

/// Learned truncated spectral convolution.
#[derive(Debug)]
pub struct SpectralConv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub modes: usize,
    pub wr: Param,
    pub wi: Param,
}

impl SpectralConv2d {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, modes: usize) -> Self {
        assert!(modes >= 1, "spectral layer needs at least one mode");
        let shape = [2 * modes - 1, modes, c_in, c_out];
        let len = shape.iter().product();
        let scale = 1.0 / (c_in * c_out) as f64;
        let mut draw = || (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
        let wr = Param::new(draw(), &shape);
        let wi = Param::new(draw(), &shape);
        SpectralConv2d { c_in, c_out, modes, wr, wi }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        spectral_conv2d(x, &self.wr.tensor(), &self.wi.tensor(), self.modes)
    }
}

impl Module for SpectralConv2d {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight_re"), &self.wr);
        f(join(prefix, "weight_im"), &self.wi);
    }
}

/// `[B, C, T, H, W] → [B·C, T, H, W]`: every channel of every sample becomes
/// an independent batch element.
pub fn fold_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 5, "fold expects [B, C, T, H, W], got {s:?}");
    x.reshape(&[s[0] * s[1], s[2], s[3], s[4]])
}

/// Inverse of [`fold_channels`] for a known batch size.
pub fn unfold_channels(x: &Tensor, batch: usize) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "unfold expects [B·C, T, H, W], got {s:?}");
    assert!(batch > 0 && s[0] % batch == 0, "folded batch {} is not a multiple of {batch}", s[0]);
    x.reshape(&[batch, s[0] / batch, s[1], s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Direct evaluation with explicit sums over grid points and modes.
    fn brute_force(x: &[f64], n: usize, cin: usize, h: usize, w: usize, wr: &[f64], wi: &[f64], m: usize, cout: usize) -> Vec<f64> {
        let m_use = m.min(max_modes(h, w));
        let mut y = vec![0.0; n * cout * h * w];
        for b in 0..n {
            for a in 0..2 * m - 1 {
                let kx = a as isize - (m as isize - 1);
                if kx.unsigned_abs() >= m_use {
                    continue;
                }
                for ky in 0..m_use {
                    let slot = a * m + ky;
                    let theta = |i: usize, j: usize| 2.0 * PI * (kx as f64 * i as f64 / h as f64 + ky as f64 * j as f64 / w as f64);
                    let mut xk = vec![(0.0, 0.0); cin];
                    for c in 0..cin {
                        for i in 0..h {
                            for j in 0..w {
                                let v = x[((b * cin + c) * h + i) * w + j];
                                xk[c].0 += v * theta(i, j).cos();
                                xk[c].1 -= v * theta(i, j).sin();
                            }
                        }
                    }
                    for o in 0..cout {
                        let (mut yr, mut yi) = (0.0, 0.0);
                        for c in 0..cin {
                            let k = (slot * cin + c) * cout + o;
                            yr += xk[c].0 * wr[k] - xk[c].1 * wi[k];
                            yi += xk[c].0 * wi[k] + xk[c].1 * wr[k];
                        }
                        let weight = if ky > 0 { 2.0 } else { 1.0 } / (h * w) as f64;
                        for i in 0..h {
                            for j in 0..w {
                                let t = theta(i, j);
                                y[((b * cout + o) * h + i) * w + j] += weight * (yr * t.cos() - yi * t.sin());
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(n, cin, cout, h, w, m) in &[(2, 3, 2, 8, 8, 3), (1, 2, 3, 6, 10, 5), (1, 1, 1, 4, 4, 1), (2, 2, 2, 5, 7, 2)] {
            let layer = SpectralConv2d::new(&mut rng, cin, cout, m);
            let x = random(&mut rng, n * cin * h * w);
            let y = layer.forward(&Tensor::from_vec(x.clone(), &[n, cin, h, w]));
            let r = brute_force(&x, n, cin, h, w, &layer.wr.to_vec(), &layer.wi.to_vec(), m, cout);
            let err = y.data().iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "max error {err} for {:?}", (n, cin, cout, h, w, m));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, cin, cout, h, w, m) = (2, 2, 3, 6, 6, 3);
        let xv = random(&mut rng, n * cin * h * w);
        let wrv = random(&mut rng, (2 * m - 1) * m * cin * cout);
        let wiv = random(&mut rng, wrv.len());
        let probe = random(&mut rng, n * cout * h * w);
        let loss = |x: &[f64], wr: &[f64], wi: &[f64]| {
            let y = spectral_conv2d(
                &Tensor::from_vec(x.to_vec(), &[n, cin, h, w]),
                &Tensor::from_vec(wr.to_vec(), &[2 * m - 1, m, cin, cout]),
                &Tensor::from_vec(wi.to_vec(), &[2 * m - 1, m, cin, cout]),
                m,
            );
            y.data().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let x = Tensor::variable(xv.clone(), &[n, cin, h, w]);
        let wr = Tensor::variable(wrv.clone(), &[2 * m - 1, m, cin, cout]);
        let wi = Tensor::variable(wiv.clone(), &[2 * m - 1, m, cin, cout]);
        let y = spectral_conv2d(&x, &wr, &wi, m);
        let l = y.mul(&Tensor::from_vec(probe.clone(), &[n, cout, h, w])).sum_all();
        let g = l.backward();
        let eps = 1e-6;
        let check = |analytic: &[f64], which: usize| {
            for i in (0..analytic.len()).step_by(7) {
                let mut bufs = [xv.clone(), wrv.clone(), wiv.clone()];
                bufs[which][i] += eps;
                let up = loss(&bufs[0], &bufs[1], &bufs[2]);
                bufs[which][i] -= 2.0 * eps;
                let dn = loss(&bufs[0], &bufs[1], &bufs[2]);
                let fd = (up - dn) / (2.0 * eps);
                assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {which}[{i}]: fd {fd} vs {}", analytic[i]);
            }
        };
        check(g.get(&x).unwrap(), 0);
        check(g.get(&wr).unwrap(), 1);
        check(g.get(&wi).unwrap(), 2);
    }

    #[test]
    fn modes_clamp_to_grid() {
        assert_eq!(effective_modes(20, 16, 16), 8);
        assert_eq!(effective_modes(4, 16, 16), 4);
        assert_eq!(effective_modes(0, 16, 16), 1);
        assert_eq!(retained_mode_count(8), 120);
        let modes = modes_for(8, 8, 16, 16);
        assert_eq!(modes.len(), 120);
        let mut pos: Vec<usize> = modes.iter().map(|m| m.pos).collect();
        pos.sort_unstable();
        pos.dedup();
        assert_eq!(pos.len(), 120, "retained bins must be distinct");
    }

    #[test]
    fn band_limited_input_passes_through_identity_weights() {
        // Identity weights reproduce any field whose spectrum lies in the kept band.
        let (h, w, m) = (8, 8, 4);
        let mut layer = SpectralConv2d::new(&mut ChaCha8Rng::seed_from_u64(0), 1, 1, m);
        layer.wr = Param::new(vec![1.0; (2 * m - 1) * m], &[2 * m - 1, m, 1, 1]);
        layer.wi = Param::zeros(&[2 * m - 1, m, 1, 1]);
        let x: Vec<f64> = (0..h * w)
            .map(|p| {
                let (i, j) = ((p / w) as f64, (p % w) as f64);
                0.3 + (2.0 * PI * (i + 2.0 * j) / 8.0).cos() + 0.5 * (2.0 * PI * (3.0 * i - j) / 8.0).sin()
            })
            .collect();
        let y = layer.forward(&Tensor::from_vec(x.clone(), &[1, 1, h, w]));
        for (a, b) in y.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn commutes_with_circular_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, h, w) = (2, 8, 8);
        let layer = SpectralConv2d::new(&mut rng, c, c, 3);
        let x = random(&mut rng, c * h * w);
        let (di, dj) = (3, 5);
        let shift = |v: &[f64]| {
            let mut out = vec![0.0; v.len()];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[(ch * h + (i + di) % h) * w + (j + dj) % w] = v[(ch * h + i) * w + j];
                    }
                }
            }
            out
        };
        let y = layer.forward(&Tensor::from_vec(x.clone(), &[1, c, h, w]));
        let ys = layer.forward(&Tensor::from_vec(shift(&x), &[1, c, h, w]));
        for (a, b) in shift(y.data()).iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fold_roundtrip() {
        let x = Tensor::from_vec((0..2 * 3 * 4 * 2 * 2).map(|i| i as f64).collect(), &[2, 3, 4, 2, 2]);
        let f = fold_channels(&x);
        assert_eq!(f.shape(), &[6, 4, 2, 2]);
        // element (b=1, c=2, t=3) lands in folded row 1·3+2
        assert_eq!(f.data()[(5 * 4 + 3) * 4], x.data()[(((3 + 2) * 4 + 3) * 2) * 2]);
        let u = unfold_channels(&f, 2);
        assert_eq!(u.shape(), x.shape());
        assert_eq!(u.data(), x.data());
    }
}
