use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempo_core::spectral::{fold_channels, max_modes, spectral_conv2d, unfold_channels};
use tempo_nn::Tensor;

/// Reference layer: explicit DFT sums over the retained modes, each mode
/// paired with its conjugate so the result is real.
#[allow(clippy::too_many_arguments)]
fn dft_layer(x: &[f64], n: usize, cin: usize, cout: usize, h: usize, w: usize, wr: &[f64], wi: &[f64], m: usize) -> Vec<f64> {
    let mu = m.min(max_modes(h, w)) as isize;
    let phase = |kx: isize, ky: isize, i: usize, j: usize| {
        Complex64::from_polar(1.0, 2.0 * PI * (kx as f64 * i as f64 / h as f64 + ky as f64 * j as f64 / w as f64))
    };
    let mut y = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for kx in -(mu - 1)..mu {
            for ky in 0..mu {
                let slot = (kx + m as isize - 1) as usize * m + ky as usize;
                let xk: Vec<Complex64> = (0..cin)
                    .map(|c| {
                        let mut s = Complex64::new(0.0, 0.0);
                        for i in 0..h {
                            for j in 0..w {
                                s += x[((b * cin + c) * h + i) * w + j] * phase(kx, ky, i, j).conj();
                            }
                        }
                        s
                    })
                    .collect();
                for o in 0..cout {
                    let mut yk = Complex64::new(0.0, 0.0);
                    for c in 0..cin {
                        let k = (slot * cin + c) * cout + o;
                        yk += xk[c] * Complex64::new(wr[k], wi[k]);
                    }
                    for i in 0..h {
                        for j in 0..w {
                            let v = yk * phase(kx, ky, i, j);
                            let contrib = if ky > 0 { 2.0 * v.re } else { v.re };
                            y[((b * cout + o) * h + i) * w + j] += contrib / (h * w) as f64;
                        }
                    }
                }
            }
        }
    }
    y
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn apply(x: &[f64], shape: [usize; 4], wr: &[f64], wi: &[f64], m: usize, cout: usize) -> Vec<f64> {
    let ws = [2 * m - 1, m, shape[1], cout];
    spectral_conv2d(&Tensor::from_vec(x.to_vec(), &shape), &Tensor::from_vec(wr.to_vec(), &ws), &Tensor::from_vec(wi.to_vec(), &ws), m).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn matches_brute_force_dft(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 2usize..=16, w in 2usize..=16, m in 1usize..10, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, n * cin * h * w);
        let nw = (2 * m - 1) * m * cin * cout;
        let (wr, wi) = (uniform(&mut rng, nw), uniform(&mut rng, nw));
        let got = apply(&x, [n, cin, h, w], &wr, &wi, m, cout);
        let want = dft_layer(&x, n, cin, cout, h, w, &wr, &wi, m);
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-10, "max abs error {err}");
    }

    #[test]
    fn folded_application_is_bit_exact(
        b in 1usize..3, c in 1usize..4, t in 1usize..4, h in 2usize..10, w in 2usize..10, m in 1usize..5, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, b * c * t * h * w);
        let nw = (2 * m - 1) * m * t * t;
        let (wr, wi) = (uniform(&mut rng, nw), uniform(&mut rng, nw));
        let ws = [2 * m - 1, m, t, t];
        let (wr_t, wi_t) = (Tensor::from_vec(wr.clone(), &ws), Tensor::from_vec(wi.clone(), &ws));
        let folded = fold_channels(&Tensor::from_vec(x.clone(), &[b, c, t, h, w]));
        let y = unfold_channels(&spectral_conv2d(&folded, &wr_t, &wi_t, m), b);
        prop_assert_eq!(y.shape(), &[b, c, t, h, w]);
        let block = t * h * w;
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * block;
                let single = apply(&x[off..off + block], [1, t, h, w], &wr, &wi, m, t);
                prop_assert!(y.data()[off..off + block] == single[..], "sample {bi} channel {ci} differs");
            }
        }
    }
}

/// Unit weight on one mode: the layer passes that Fourier mode through.
fn pure_mode_case(h: usize, w: usize, m: usize, kx: isize, ky: isize) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> =
        (0..h * w).map(|p| (2.0 * PI * (kx as f64 * (p / w) as f64 / h as f64 + ky as f64 * (p % w) as f64 / w as f64)).cos()).collect();
    let mut wr = vec![0.0; (2 * m - 1) * m];
    let slot = (kx + m as isize - 1) as usize * m + ky as usize;
    wr[slot] = 1.0;
    let y = apply(&x, [1, 1, h, w], &wr, &vec![0.0; wr.len()], m, 1);
    (x, y)
}

#[test]
fn retained_pure_mode_passes_through() {
    for &(h, w, m, kx, ky) in &[(16, 16, 4, 3, 2), (16, 16, 4, -2, 1), (12, 10, 3, 0, 2), (8, 8, 2, 1, 0)] {
        let (x, y) = pure_mode_case(h, w, m, kx, ky);
        // Only (kx, ky) of the pair (kx, ky), (−kx, −ky) is stored in the
        // half plane; ky = 0 modes with kx ≠ 0 need both slots set.
        let scale = if ky == 0 && kx != 0 { 0.5 } else { 1.0 };
        let err = x.iter().zip(&y).map(|(a, b)| (scale * a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{:?}: {err}", (h, w, m, kx, ky));
    }
}

#[test]
fn modes_outside_the_box_are_removed() {
    let (h, w, m) = (16, 16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let nw = (2 * m - 1) * m;
    let (wr, wi) = (uniform(&mut rng, nw), uniform(&mut rng, nw));
    for &(kx, ky) in &[(3, 0), (0, 3), (5, 5), (-4, 1), (8, 8)] {
        let x: Vec<f64> =
            (0..h * w).map(|p| (2.0 * PI * (kx as f64 * (p / w) as f64 / h as f64 + ky as f64 * (p % w) as f64 / w as f64)).sin()).collect();
        let y = apply(&x, [1, 1, h, w], &wr, &wi, m, 1);
        let peak = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(peak < 1e-10, "mode {:?} leaked {peak}", (kx, ky));
    }
}
