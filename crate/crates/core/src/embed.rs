//! Sinusoidal embedding of the flow time `t` and the temporal offset `Δ`.

use rand::Rng;
use tempo_nn::layers::Linear;
use tempo_nn::{join, Module, Param, Tensor};

/// Flow times live in `[0, 1]`; they are stretched before the sinusoids so
/// the fastest frequency resolves small steps.
pub const FLOW_TIME_SCALE: f64 = 1000.0;
pub const MAX_PERIOD: f64 = 10_000.0;

/// Raw features `[sin(ω t'), cos(ω t'), sin(ω Δ), cos(ω Δ)]` with
/// geometrically spaced `ω_i = MAX_PERIOD^(-i/n)` and `t' = FLOW_TIME_SCALE·t`.
pub fn sinusoidal_features(t: f64, delta: f64, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * n_freq);
    let freqs: Vec<f64> = (0..n_freq).map(|i| MAX_PERIOD.powf(-(i as f64) / n_freq as f64)).collect();
    for (v, scale) in [(t, FLOW_TIME_SCALE), (delta, 1.0)] {
        out.extend(freqs.iter().map(|w| (w * v * scale).sin()));
        out.extend(freqs.iter().map(|w| (w * v * scale).cos()));
    }
    out
}

/// Sinusoidal features followed by a two-layer SiLU MLP.
#[derive(Debug)]
pub struct TimeEmbedding {
    pub n_freq: usize,
    pub dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(rng: &mut impl Rng, dim: usize) -> Self {
        let n_freq = (dim / 4).max(1);
        TimeEmbedding { n_freq, dim, fc1: Linear::new(rng, 4 * n_freq, dim, true), fc2: Linear::new(rng, dim, dim, true) }
    }

    /// `[B, dim]` embedding of per-sample `(t, Δ)`.
    pub fn forward(&self, t: &[f64], delta: &[f64]) -> Tensor {
        assert_eq!(t.len(), delta.len(), "t and Δ batch sizes differ");
        let raw: Vec<f64> = t.iter().zip(delta).flat_map(|(&t, &d)| sinusoidal_features(t, d, self.n_freq)).collect();
        let x = Tensor::from_vec(raw, &[t.len(), 4 * self.n_freq]);
        self.fc2.forward(&self.fc1.forward(&x).silu())
    }
}

impl Module for TimeEmbedding {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sine_components_vanish_at_zero() {
        let f = sinusoidal_features(0.0, 3.0, 8);
        assert!(f[..8].iter().all(|&v| v == 0.0));
        assert!(f[8..16].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn offsets_are_distinguishable() {
        let emb = TimeEmbedding::new(&mut ChaCha8Rng::seed_from_u64(0), 32);
        let e = emb.forward(&[0.5, 0.5], &[1.0, 2.0]);
        let norm = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (a, b) = (norm(&e.data()[..32]), norm(&e.data()[32..]));
        assert!((a - b).abs() > 0.0);
    }
}
