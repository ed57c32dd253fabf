//! Time-conditioned Fourier neural operator over folded latent channels.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tempo_nn::layers::{Conv2d, GroupNorm, Linear};
use tempo_nn::ops::cat;
use tempo_nn::{join, Module, Param, Tensor};

use super::LatentGeometry;
use crate::embed::TimeEmbedding;
use crate::spectral::{effective_modes, fold_channels, unfold_channels, SpectralConv2d};

/// Where the `(t, Δ)` embedding enters each Fourier layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeConditioning {
    /// Scale-and-shift of the normalized activations ahead of the layer.
    #[default]
    Activations,
    /// Per-output-channel scaling of the spectral weights `R(k)`.
    Weights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TempoConfig {
    pub n_modes: usize,
    pub hidden: usize,
    pub projection: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub groups: usize,
    pub time_conditioning: TimeConditioning,
    /// Pointwise mixing across latent channels around the folded operator.
    pub channel_mix: bool,
}

impl Default for TempoConfig {
    fn default() -> Self {
        TempoConfig {
            n_modes: 20,
            hidden: 64,
            projection: 64,
            depth: 4,
            embed_dim: 128,
            groups: 8,
            time_conditioning: TimeConditioning::Activations,
            channel_mix: true,
        }
    }
}

/// Number of latent snapshots stacked along the operator's channel axis:
/// the noisy state, the reference and the conditioning frame.
pub const STACK: usize = 3;

#[derive(Debug)]
struct FourierLayer {
    norm: GroupNorm,
    film: Linear,
    spectral: SpectralConv2d,
    bypass: Conv2d,
}

#[derive(Debug)]
pub struct Tempo {
    pub config: TempoConfig,
    pub geometry: LatentGeometry,
    /// Mode count after clamping to the latent grid.
    pub modes: usize,
    embed: TimeEmbedding,
    mix_in: Option<Conv2d>,
    lift: Conv2d,
    layers: Vec<FourierLayer>,
    proj: Conv2d,
    head: Conv2d,
    mix_out: Option<Conv2d>,
}

impl Tempo {
    pub fn new(rng: &mut impl Rng, config: &TempoConfig, geometry: LatentGeometry) -> Self {
        let c = config;
        let cz = geometry.channels;
        let modes = effective_modes(c.n_modes, geometry.height, geometry.width);
        let embed = TimeEmbedding::new(rng, c.embed_dim);
        let mix_in = c.channel_mix.then(|| Conv2d::pointwise(rng, STACK * cz, STACK * cz).zero_init());
        let lift = Conv2d::pointwise(rng, STACK, c.hidden);
        let layers = (0..c.depth)
            .map(|_| FourierLayer {
                norm: GroupNorm::new(c.groups, c.hidden),
                film: Linear::zeros(c.embed_dim, 2 * c.hidden),
                spectral: SpectralConv2d::new(rng, c.hidden, c.hidden, modes),
                bypass: Conv2d::pointwise(rng, c.hidden, c.hidden),
            })
            .collect();
        let proj = Conv2d::pointwise(rng, c.hidden, c.projection);
        let head = Conv2d::pointwise(rng, c.projection, 1);
        let (head, mix_out) = if c.channel_mix {
            (head, Some(Conv2d::pointwise(rng, cz, cz).zero_init()))
        } else {
            (head.zero_init(), None)
        };
        Tempo { config: c.clone(), geometry, modes, embed, mix_in, lift, layers, proj, head, mix_out }
    }

    pub fn forward(&self, z_t: &Tensor, z_ref: &Tensor, z_cond: &Tensor, t: &[f64], delta: &[f64]) -> Tensor {
        let s = z_t.shape().to_vec();
        let (b, cz, h, w) = (s[0], s[1], s[2], s[3]);
        let hid = self.config.hidden;
        let one = |z: &Tensor| z.reshape(&[b, cz, 1, h, w]);
        let mut x = cat(&[one(z_t), one(z_ref), one(z_cond)], 2);
        if let Some(mix) = &self.mix_in {
            let flat = x.reshape(&[b, STACK * cz, h, w]);
            x = flat.add(&mix.forward(&flat)).reshape(&[b, cz, STACK, h, w]);
        }
        let emb = self.embed.forward(t, delta).silu();
        let mut y = self.lift.forward(&fold_channels(&x));
        for (i, layer) in self.layers.iter().enumerate() {
            let film = layer.film.forward(&emb);
            let scale = film.narrow(1, 0, hid).reshape(&[b, 1, hid, 1]).add_scalar(1.0);
            let per_sample = |v: &Tensor| v.reshape(&[b, cz, hid, h * w]);
            let normed = layer.norm.forward(&y);
            let next = match self.config.time_conditioning {
                TimeConditioning::Activations => {
                    let shift = film.narrow(1, hid, hid).reshape(&[b, 1, hid, 1]);
                    let m = per_sample(&normed).mul(&scale).add(&shift).reshape(&[b * cz, hid, h, w]);
                    layer.spectral.forward(&m).add(&layer.bypass.forward(&m))
                }
                TimeConditioning::Weights => {
                    let spec = per_sample(&layer.spectral.forward(&normed)).mul(&scale).reshape(&[b * cz, hid, h, w]);
                    spec.add(&layer.bypass.forward(&normed))
                }
            };
            y = if i + 1 < self.layers.len() { next.gelu() } else { next };
        }
        let out = self.head.forward(&self.proj.forward(&y).gelu());
        let out = unfold_channels(&out, b).reshape(&[b, cz, h, w]);
        match &self.mix_out {
            Some(mix) => mix.forward(&out),
            None => out,
        }
    }
}

impl Module for Tempo {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.embed.visit_params(&join(prefix, "embed"), f);
        if let Some(m) = &self.mix_in {
            m.visit_params(&join(prefix, "mix_in"), f);
        }
        self.lift.visit_params(&join(prefix, "lift"), f);
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layers.{i}"));
            l.norm.visit_params(&join(&p, "norm"), f);
            l.film.visit_params(&join(&p, "film"), f);
            l.spectral.visit_params(&join(&p, "spectral"), f);
            l.bypass.visit_params(&join(&p, "bypass"), f);
        }
        self.proj.visit_params(&join(prefix, "proj"), f);
        self.head.visit_params(&join(prefix, "head"), f);
        if let Some(m) = &self.mix_out {
            m.visit_params(&join(prefix, "mix_out"), f);
        }
    }
}
