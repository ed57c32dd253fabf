//! Vision transformer baseline with long skip connections between the
//! input and output halves of the block stack.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tempo_nn::layers::{LayerNorm, Linear, SelfAttention};
use tempo_nn::ops::cat;
use tempo_nn::{join, Module, Param, Tensor};

use super::LatentGeometry;
use crate::embed::TimeEmbedding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub hidden: usize,
    pub depth: usize,
    pub mid_depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig { hidden: 256, depth: 4, mid_depth: 5, heads: 4, patch: 4, mlp_ratio: 4 }
    }
}

#[derive(Debug)]
struct Block {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    skip: Option<Linear>,
}

impl Block {
    fn new(rng: &mut impl Rng, c: &VitConfig, with_skip: bool) -> Self {
        let d = c.hidden;
        Block {
            norm1: LayerNorm::new(d),
            attn: SelfAttention::new(rng, d, c.heads),
            norm2: LayerNorm::new(d),
            fc1: Linear::new(rng, d, c.mlp_ratio * d, true),
            fc2: Linear::new(rng, c.mlp_ratio * d, d, true),
            skip: with_skip.then(|| Linear::new(rng, 2 * d, d, true)),
        }
    }

    fn forward(&self, x: &Tensor, skip: Option<&Tensor>) -> Tensor {
        let x = match (&self.skip, skip) {
            (Some(l), Some(s)) => l.forward(&cat(&[x.clone(), s.clone()], 2)),
            _ => x.clone(),
        };
        let x = x.add(&self.attn.forward(&self.norm1.forward(&x)));
        x.add(&self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)).gelu()))
    }

    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Param)) {
        if let Some(s) = &self.skip {
            s.visit_params(&join(p, "skip"), f);
        }
        self.norm1.visit_params(&join(p, "norm1"), f);
        self.attn.visit_params(&join(p, "attn"), f);
        self.norm2.visit_params(&join(p, "norm2"), f);
        self.fc1.visit_params(&join(p, "fc1"), f);
        self.fc2.visit_params(&join(p, "fc2"), f);
    }
}

#[derive(Debug)]
pub struct Vit {
    pub config: VitConfig,
    pub geometry: LatentGeometry,
    embed: TimeEmbedding,
    patch_in: Linear,
    pos: Param,
    blocks_in: Vec<Block>,
    blocks_mid: Vec<Block>,
    blocks_out: Vec<Block>,
    norm_out: LayerNorm,
    patch_out: Linear,
}

impl Vit {
    pub fn new(rng: &mut impl Rng, config: &VitConfig, geometry: LatentGeometry) -> Self {
        let c = config;
        let p = c.patch;
        assert!(
            geometry.height % p == 0 && geometry.width % p == 0,
            "latent grid {}x{} is not divisible by patch size {p}",
            geometry.height,
            geometry.width
        );
        let tokens = (geometry.height / p) * (geometry.width / p);
        let embed = TimeEmbedding::new(rng, c.hidden);
        let patch_in = Linear::new(rng, 3 * geometry.channels * p * p, c.hidden, true);
        let pos: Vec<f64> = (0..(tokens + 1) * c.hidden).map(|_| rng.random_range(-0.02..0.02)).collect();
        let blocks_in = (0..c.depth).map(|_| Block::new(rng, c, false)).collect();
        let blocks_mid = (0..c.mid_depth).map(|_| Block::new(rng, c, false)).collect();
        let blocks_out = (0..c.depth).map(|_| Block::new(rng, c, true)).collect();
        Vit {
            config: c.clone(),
            geometry,
            embed,
            patch_in,
            pos: Param::new(pos, &[tokens + 1, c.hidden]),
            blocks_in,
            blocks_mid,
            blocks_out,
            norm_out: LayerNorm::new(c.hidden),
            patch_out: Linear::zeros(c.hidden, geometry.channels * p * p),
        }
    }

    pub fn forward(&self, z_t: &Tensor, z_ref: &Tensor, z_cond: &Tensor, t: &[f64], delta: &[f64]) -> Tensor {
        let s = z_t.shape();
        let (b, cz, h, w) = (s[0], s[1], s[2], s[3]);
        let p = self.config.patch;
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let d = self.config.hidden;
        let x = cat(&[z_t.clone(), z_ref.clone(), z_cond.clone()], 1);
        let c3 = 3 * cz;
        let patches = x.reshape(&[b, c3, gh, p, gw, p]).permute(&[0, 2, 4, 1, 3, 5]).reshape(&[b, n, c3 * p * p]);
        let tok = self.patch_in.forward(&patches);
        let time = self.embed.forward(t, delta).reshape(&[b, 1, d]);
        let mut x = cat(&[time, tok], 1).add(&self.pos.tensor());
        let mut skips = Vec::with_capacity(self.blocks_in.len());
        for blk in &self.blocks_in {
            x = blk.forward(&x, None);
            skips.push(x.clone());
        }
        for blk in &self.blocks_mid {
            x = blk.forward(&x, None);
        }
        for blk in &self.blocks_out {
            let s = skips.pop().expect("skip stack underflow");
            x = blk.forward(&x, Some(&s));
        }
        let y = self.patch_out.forward(&self.norm_out.forward(&x)).narrow(1, 1, n);
        y.reshape(&[b, gh, gw, cz, p, p]).permute(&[0, 3, 1, 4, 2, 5]).reshape(&[b, cz, h, w])
    }
}

impl Module for Vit {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.embed.visit_params(&join(prefix, "embed"), f);
        self.patch_in.visit_params(&join(prefix, "patch_in"), f);
        f(join(prefix, "pos"), &self.pos);
        for (name, blocks) in [("blocks_in", &self.blocks_in), ("blocks_mid", &self.blocks_mid), ("blocks_out", &self.blocks_out)] {
            for (i, b) in blocks.iter().enumerate() {
                b.visit(&join(prefix, &format!("{name}.{i}")), f);
            }
        }
        self.norm_out.visit_params(&join(prefix, "norm_out"), f);
        self.patch_out.visit_params(&join(prefix, "patch_out"), f);
    }
}
