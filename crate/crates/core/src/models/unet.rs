//! Compact diffusion-style U-Net baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tempo_nn::layers::{Conv2d, GroupNorm, Linear, SelfAttention};
use tempo_nn::ops::{cat, upsample_nearest2x};
use tempo_nn::{join, Module, Param, Tensor};

use super::LatentGeometry;
use crate::embed::TimeEmbedding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnetConfig {
    pub hidden: usize,
    pub channel_mult: Vec<usize>,
    /// Downsampling factors whose level carries self-attention.
    pub attention_resolutions: Vec<usize>,
    /// Residual blocks per level.
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub groups: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            hidden: 64,
            channel_mult: vec![1, 2, 4],
            attention_resolutions: vec![1, 2, 2],
            depth: 3,
            embed_dim: 256,
            heads: 4,
            groups: 8,
        }
    }
}

#[derive(Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, emb_dim: usize, groups: usize) -> Self {
        ResBlock {
            norm1: GroupNorm::new(groups, c_in),
            conv1: Conv2d::same3(rng, c_in, c_out),
            emb: Linear::new(rng, emb_dim, c_out, true),
            norm2: GroupNorm::new(groups, c_out),
            conv2: Conv2d::same3(rng, c_out, c_out).zero_init(),
            skip: (c_in != c_out).then(|| Conv2d::pointwise(rng, c_in, c_out)),
        }
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        let e = self.emb.forward(emb);
        let c = e.shape()[1];
        let h = h.add(&e.reshape(&[e.shape()[0], c, 1, 1]));
        let h = self.conv2.forward(&self.norm2.forward(&h).silu());
        match &self.skip {
            Some(s) => s.forward(x).add(&h),
            None => x.add(&h),
        }
    }

    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.norm1.visit_params(&join(p, "norm1"), f);
        self.conv1.visit_params(&join(p, "conv1"), f);
        self.emb.visit_params(&join(p, "emb"), f);
        self.norm2.visit_params(&join(p, "norm2"), f);
        self.conv2.visit_params(&join(p, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit_params(&join(p, "skip"), f);
        }
    }
}

/// Self-attention over the spatial positions of a feature map.
#[derive(Debug)]
pub(crate) struct SpatialAttention {
    norm: GroupNorm,
    attn: SelfAttention,
}

impl SpatialAttention {
    pub(crate) fn new(rng: &mut impl Rng, channels: usize, heads: usize, groups: usize) -> Self {
        let mut heads = heads.clamp(1, channels);
        while channels % heads != 0 {
            heads -= 1;
        }
        SpatialAttention { norm: GroupNorm::new(groups, channels), attn: SelfAttention::new(rng, channels, heads) }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let tokens = self.norm.forward(x).reshape(&[b, c, h * w]).permute(&[0, 2, 1]);
        let y = self.attn.forward(&tokens).permute(&[0, 2, 1]).reshape(&[b, c, h, w]);
        x.add(&y)
    }

    pub(crate) fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.norm.visit_params(&join(p, "norm"), f);
        self.attn.visit_params(&join(p, "attn"), f);
    }
}

#[derive(Debug)]
enum Stage {
    Res(ResBlock, Option<SpatialAttention>),
    Down(Conv2d),
    Up(Conv2d),
}

#[derive(Debug)]
pub struct Unet {
    pub config: UnetConfig,
    pub geometry: LatentGeometry,
    embed: TimeEmbedding,
    input: Conv2d,
    down: Vec<Stage>,
    mid: (ResBlock, SpatialAttention, ResBlock),
    up: Vec<Stage>,
    out_norm: GroupNorm,
    out: Conv2d,
}

impl Unet {
    pub fn new(rng: &mut impl Rng, config: &UnetConfig, geometry: LatentGeometry) -> Self {
        let c = config;
        let e = c.embed_dim;
        let g = c.groups;
        let levels = c.channel_mult.len();
        assert!(levels > 0, "U-Net needs at least one level");
        let embed = TimeEmbedding::new(rng, e);
        let input = Conv2d::same3(rng, 3 * geometry.channels, c.hidden);
        let attn_at = |level: usize| c.attention_resolutions.contains(&(1 << level));

        let mut down = Vec::new();
        let mut skips = vec![c.hidden];
        let mut ch = c.hidden;
        for (level, &mult) in c.channel_mult.iter().enumerate() {
            let out = c.hidden * mult;
            for _ in 0..c.depth {
                let block = ResBlock::new(rng, ch, out, e, g);
                let att = attn_at(level).then(|| SpatialAttention::new(rng, out, c.heads, g));
                down.push(Stage::Res(block, att));
                ch = out;
                skips.push(ch);
            }
            if level + 1 < levels {
                down.push(Stage::Down(Conv2d::new(rng, ch, ch, 3, 2, 1)));
                skips.push(ch);
            }
        }
        let mid = (
            ResBlock::new(rng, ch, ch, e, g),
            SpatialAttention::new(rng, ch, c.heads, g),
            ResBlock::new(rng, ch, ch, e, g),
        );
        let mut up = Vec::new();
        for (level, &mult) in c.channel_mult.iter().enumerate().rev() {
            let out = c.hidden * mult;
            for r in 0..=c.depth {
                let skip = skips.pop().expect("skip stack underflow");
                let block = ResBlock::new(rng, ch + skip, out, e, g);
                let att = attn_at(level).then(|| SpatialAttention::new(rng, out, c.heads, g));
                up.push(Stage::Res(block, att));
                ch = out;
                if level > 0 && r == c.depth {
                    up.push(Stage::Up(Conv2d::same3(rng, ch, ch)));
                }
            }
        }
        Unet {
            config: c.clone(),
            geometry,
            embed,
            input,
            down,
            mid,
            up,
            out_norm: GroupNorm::new(g, ch),
            out: Conv2d::same3(rng, ch, geometry.channels).zero_init(),
        }
    }

    pub fn forward(&self, z_t: &Tensor, z_ref: &Tensor, z_cond: &Tensor, t: &[f64], delta: &[f64]) -> Tensor {
        let emb = self.embed.forward(t, delta).silu();
        let mut h = self.input.forward(&cat(&[z_t.clone(), z_ref.clone(), z_cond.clone()], 1));
        let mut skips = vec![h.clone()];
        for stage in &self.down {
            h = match stage {
                Stage::Res(block, att) => {
                    let y = block.forward(&h, &emb);
                    att.as_ref().map_or(y.clone(), |a| a.forward(&y))
                }
                Stage::Down(conv) => conv.forward(&h),
                Stage::Up(_) => unreachable!(),
            };
            skips.push(h.clone());
        }
        h = self.mid.0.forward(&h, &emb);
        h = self.mid.1.forward(&h);
        h = self.mid.2.forward(&h, &emb);
        for stage in &self.up {
            h = match stage {
                Stage::Res(block, att) => {
                    let skip = skips.pop().expect("skip stack underflow");
                    let y = block.forward(&cat(&[h, skip], 1), &emb);
                    att.as_ref().map_or(y.clone(), |a| a.forward(&y))
                }
                Stage::Up(conv) => conv.forward(&upsample_nearest2x(&h)),
                Stage::Down(_) => unreachable!(),
            };
        }
        self.out.forward(&self.out_norm.forward(&h).silu())
    }
}

fn visit_stages<'a>(stages: &'a [Stage], p: &str, f: &mut dyn FnMut(String, &'a Param)) {
    for (i, s) in stages.iter().enumerate() {
        let q = join(p, &i.to_string());
        match s {
            Stage::Res(b, a) => {
                b.visit(&join(&q, "res"), f);
                if let Some(a) = a {
                    a.visit(&join(&q, "attn"), f);
                }
            }
            Stage::Down(c) | Stage::Up(c) => c.visit_params(&join(&q, "resample"), f),
        }
    }
}

impl Module for Unet {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.embed.visit_params(&join(prefix, "embed"), f);
        self.input.visit_params(&join(prefix, "input"), f);
        visit_stages(&self.down, &join(prefix, "down"), f);
        self.mid.0.visit(&join(prefix, "mid.0"), f);
        self.mid.1.visit(&join(prefix, "mid.1"), f);
        self.mid.2.visit(&join(prefix, "mid.2"), f);
        visit_stages(&self.up, &join(prefix, "up"), f);
        self.out_norm.visit_params(&join(prefix, "out_norm"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }
}
