//! Parameterized building blocks.

use rand::Rng;

use crate::ops::{conv2d, group_norm, layer_norm};
use crate::param::{join, Module, Param};
use crate::tensor::Tensor;

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Affine map over the last axis. `weight` is stored `[in, out]`.
#[derive(Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Param::new(uniform(rng, d_in * d_out, bound), &[d_in, d_out]),
            bias: bias.then(|| Param::new(uniform(rng, d_out, bound), &[d_out])),
        }
    }

    /// All-zero weights and bias; used for output heads.
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear { weight: Param::zeros(&[d_in, d_out]), bias: Some(Param::zeros(&[d_out])) }
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&self.weight.tensor());
        match &self.bias {
            Some(b) => y.add(&b.tensor()),
            None => y,
        }
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Square-kernel 2D convolution over NCHW input.
#[derive(Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Conv2d {
            weight: Param::new(uniform(rng, c_out * c_in * k * k, bound), &[c_out, c_in, k, k]),
            bias: Param::new(uniform(rng, c_out, bound), &[c_out]),
            stride,
            pad,
        }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(rng: &mut impl Rng, c_in: usize, c_out: usize) -> Self {
        Self::new(rng, c_in, c_out, 3, 1, 1)
    }

    pub fn pointwise(rng: &mut impl Rng, c_in: usize, c_out: usize) -> Self {
        Self::new(rng, c_in, c_out, 1, 1, 0)
    }

    pub fn zero_init(mut self) -> Self {
        self.weight = Param::zeros(self.weight.shape());
        self.bias = Param::zeros(self.bias.shape());
        self
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.weight.tensor(), Some(&self.bias.tensor()), self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

#[derive(Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Param,
    pub beta: Param,
}

impl GroupNorm {
    /// Uses `groups` groups, or fewer when `channels` is not divisible.
    pub fn new(groups: usize, channels: usize) -> Self {
        let mut g = groups.min(channels).max(1);
        while channels % g != 0 {
            g -= 1;
        }
        GroupNorm {
            groups: g,
            gamma: Param::new(vec![1.0; channels], &[channels]),
            beta: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        group_norm(x, self.groups, &self.gamma.tensor(), &self.beta.tensor(), 1e-5)
    }
}

impl Module for GroupNorm {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
}

#[derive(Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm { gamma: Param::new(vec![1.0; dim], &[dim]), beta: Param::zeros(&[dim]) }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        layer_norm(x, &self.gamma.tensor(), &self.beta.tensor(), 1e-5)
    }
}

impl Module for LayerNorm {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
}

/// Multi-head self-attention over `[B, N, D]` token sequences.
#[derive(Debug)]
pub struct SelfAttention {
    pub heads: usize,
    pub qkv: Linear,
    pub out: Linear,
}

impl SelfAttention {
    pub fn new(rng: &mut impl Rng, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "attention width {dim} not divisible by {heads} heads");
        SelfAttention { heads, qkv: Linear::new(rng, dim, 3 * dim, true), out: Linear::new(rng, dim, dim, true) }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        assert_eq!(s.len(), 3, "attention expects [B, N, D]");
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        // [B,N,3,H,dh] -> [3,B,H,N,dh]
        let qkv = self.qkv.forward(x).reshape(&[b, n, 3, self.heads, dh]).permute(&[2, 0, 3, 1, 4]);
        let pick = |i| qkv.narrow(0, i, 1).reshape(&[b * self.heads, n, dh]);
        let (q, k, v) = (pick(0), pick(1), pick(2));
        let att = q.matmul(&k.transpose_last()).scale(1.0 / (dh as f64).sqrt()).softmax_last();
        let y = att.matmul(&v).reshape(&[b, self.heads, n, dh]).permute(&[0, 2, 1, 3]).reshape(&[b, n, d]);
        self.out.forward(&y)
    }
}

impl Module for SelfAttention {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let att = SelfAttention::new(&mut rng, 8, 2);
        let x: Vec<f64> = (0..3 * 8).map(|i| (i as f64 * 0.3).sin()).collect();
        let y = att.forward(&Tensor::from_vec(x.clone(), &[1, 3, 8]));
        let mut xp = x[8..16].to_vec();
        xp.extend_from_slice(&x[..8]);
        xp.extend_from_slice(&x[16..]);
        let yp = att.forward(&Tensor::from_vec(xp, &[1, 3, 8]));
        for j in 0..8 {
            assert!((y.data()[j] - yp.data()[8 + j]).abs() < 1e-12);
            assert!((y.data()[16 + j] - yp.data()[16 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_falls_back_to_divisor() {
        assert_eq!(GroupNorm::new(8, 12).groups, 6);
        assert_eq!(GroupNorm::new(8, 3).groups, 3);
    }

    #[test]
    fn names_are_dotted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let att = SelfAttention::new(&mut rng, 4, 1);
        let names: Vec<String> = att.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["qkv.weight", "qkv.bias", "out.weight", "out.bias"]);
    }
}
