//! Convolutional autoencoder between physical fields and latent grids.
//!
//! Each of the `depth` stages halves the resolution. Inputs are standardized
//! per physical channel with statistics taken from the training split, and
//! latents are rescaled per latent channel to unit variance so that the
//! flow-matching noise scales mean the same thing across datasets.

use ndarray::{Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tempo_nn::layers::{Conv2d, GroupNorm};
use tempo_nn::ops::{mse, upsample_nearest2x};
use tempo_nn::optim::Adam;
use tempo_nn::{join, no_grad, Module, Param, Tensor};

use crate::error::{CoreError, Result};
use crate::models::SpatialAttention;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Total latent channels; four per physical channel when absent.
    pub latent_channels: Option<usize>,
    pub groups: usize,
    pub heads: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { depth: 2, base_channels: 8, max_channels: 64, latent_channels: None, groups: 8, heads: 1 }
    }
}

impl AeConfig {
    pub const LATENT_PER_CHANNEL: usize = 4;

    pub fn latent_channels(&self, physical: usize) -> usize {
        self.latent_channels.unwrap_or(Self::LATENT_PER_CHANNEL * physical)
    }

    pub fn factor(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }
}

/// Per-channel affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Statistics over all samples and pixels of `[N, C, H, W]` data.
    pub fn fit(x: ArrayView4<'_, f64>) -> Self {
        let c = x.shape()[1];
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let v = x.index_axis(Axis(1), ch);
            let m = v.mean().unwrap_or(0.0);
            let s = v.mapv(|a| (a - m) * (a - m)).mean().unwrap_or(1.0).sqrt();
            mean.push(m);
            std.push(if s > 1e-12 { s } else { 1.0 });
        }
        ChannelStats { mean, std }
    }

    pub fn apply(&self, x: &mut Array4<f64>) {
        for (ch, mut v) in x.axis_iter_mut(Axis(1)).enumerate() {
            v.mapv_inplace(|a| (a - self.mean[ch]) / self.std[ch]);
        }
    }

    pub fn invert(&self, x: &mut Array4<f64>) {
        for (ch, mut v) in x.axis_iter_mut(Axis(1)).enumerate() {
            v.mapv_inplace(|a| a * self.std[ch] + self.mean[ch]);
        }
    }
}

#[derive(Debug)]
struct ResBlock {
    conv1: Conv2d,
    norm: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(rng: &mut impl Rng, ch: usize, groups: usize) -> Self {
        ResBlock { conv1: Conv2d::same3(rng, ch, ch), norm: GroupNorm::new(groups, ch), conv2: Conv2d::same3(rng, ch, ch) }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.add(&self.conv2.forward(&self.norm.forward(&self.conv1.forward(x).relu())))
    }

    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.conv1.visit_params(&join(p, "conv1"), f);
        self.norm.visit_params(&join(p, "norm"), f);
        self.conv2.visit_params(&join(p, "conv2"), f);
    }
}

#[derive(Debug)]
struct Bottleneck(ResBlock, SpatialAttention, ResBlock);

impl Bottleneck {
    fn new(rng: &mut impl Rng, ch: usize, c: &AeConfig) -> Self {
        Bottleneck(ResBlock::new(rng, ch, c.groups), SpatialAttention::new(rng, ch, c.heads, c.groups), ResBlock::new(rng, ch, c.groups))
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.2.forward(&self.1.forward(&self.0.forward(x)))
    }

    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.0.visit(&join(p, "0"), f);
        self.1.visit(&join(p, "1"), f);
        self.2.visit(&join(p, "2"), f);
    }
}

#[derive(Debug)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub physical_channels: usize,
    pub input_stats: ChannelStats,
    pub latent_stats: ChannelStats,
    enc_in: Conv2d,
    enc_stages: Vec<(ResBlock, Conv2d)>,
    enc_mid: Bottleneck,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: Bottleneck,
    dec_stages: Vec<(Conv2d, ResBlock)>,
    dec_out: Conv2d,
}

impl Autoencoder {
    pub fn new(config: &AeConfig, physical_channels: usize, seed: u64) -> Result<Self> {
        let c = config;
        if c.base_channels == 0 || c.latent_channels(physical_channels) == 0 || physical_channels == 0 {
            return Err(CoreError::Config(format!("autoencoder widths must be positive: {c:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let cz = c.latent_channels(physical_channels);
        let enc_in = Conv2d::same3(rng, physical_channels, c.width(0));
        let enc_stages = (0..c.depth)
            .map(|l| (ResBlock::new(rng, c.width(l), c.groups), Conv2d::new(rng, c.width(l), c.width(l + 1), 3, 2, 1)))
            .collect();
        let top = c.width(c.depth);
        let enc_mid = Bottleneck::new(rng, top, c);
        let enc_out = Conv2d::same3(rng, top, cz);
        let dec_in = Conv2d::same3(rng, cz, top);
        let dec_mid = Bottleneck::new(rng, top, c);
        let dec_stages = (0..c.depth)
            .rev()
            .map(|l| (Conv2d::same3(rng, c.width(l + 1), c.width(l)), ResBlock::new(rng, c.width(l), c.groups)))
            .collect();
        let dec_out = Conv2d::same3(rng, c.width(0), physical_channels);
        Ok(Autoencoder {
            config: c.clone(),
            physical_channels,
            input_stats: ChannelStats::identity(physical_channels),
            latent_stats: ChannelStats::identity(cz),
            enc_in,
            enc_stages,
            enc_mid,
            enc_out,
            dec_in,
            dec_mid,
            dec_stages,
            dec_out,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels(self.physical_channels)
    }

    /// Latent grid for a physical `h × w` grid.
    pub fn latent_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.config.factor();
        if h % f != 0 || w % f != 0 {
            return Err(CoreError::Shape(format!("grid {h}x{w} is not divisible by the compression factor {f}")));
        }
        Ok((h / f, w / f))
    }

    /// Raw encoder on standardized input.
    pub fn encode_tensor(&self, x: &Tensor) -> Tensor {
        let mut h = self.enc_in.forward(x);
        for (res, down) in &self.enc_stages {
            h = down.forward(&res.forward(&h));
        }
        self.enc_out.forward(&self.enc_mid.forward(&h))
    }

    /// Raw decoder producing standardized output.
    pub fn decode_tensor(&self, z: &Tensor) -> Tensor {
        let mut h = self.dec_mid.forward(&self.dec_in.forward(z));
        for (conv, res) in &self.dec_stages {
            h = res.forward(&conv.forward(&upsample_nearest2x(&h)));
        }
        self.dec_out.forward(&h)
    }

    fn check_input(&self, x: &ArrayView4<'_, f64>) -> Result<()> {
        let s = x.shape();
        if s[1] != self.physical_channels {
            return Err(CoreError::Shape(format!("expected {} channels, got {}", self.physical_channels, s[1])));
        }
        self.latent_grid(s[2], s[3]).map(|_| ())
    }

    /// Physical `[N, C, H, W]` fields to normalized latents, in chunks.
    pub fn encode(&self, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        self.check_input(&x)?;
        let _g = no_grad();
        let s = x.shape();
        let (h, w) = self.latent_grid(s[2], s[3])?;
        let cz = self.latent_channels();
        let mut out = Array4::zeros((s[0], cz, h, w));
        for start in (0..s[0]).step_by(CHUNK) {
            let end = (start + CHUNK).min(s[0]);
            let mut part = x.slice(ndarray::s![start..end, .., .., ..]).to_owned();
            self.input_stats.apply(&mut part);
            let z = self.encode_tensor(&to_tensor(part));
            let mut z = from_tensor(&z);
            self.latent_stats.apply(&mut z);
            out.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&z);
        }
        Ok(out)
    }

    /// Normalized latents back to physical fields.
    pub fn decode(&self, z: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        let s = z.shape();
        if s[1] != self.latent_channels() {
            return Err(CoreError::Shape(format!("expected {} latent channels, got {}", self.latent_channels(), s[1])));
        }
        let _g = no_grad();
        let f = self.config.factor();
        let mut out = Array4::zeros((s[0], self.physical_channels, s[2] * f, s[3] * f));
        for start in (0..s[0]).step_by(CHUNK) {
            let end = (start + CHUNK).min(s[0]);
            let mut part = z.slice(ndarray::s![start..end, .., .., ..]).to_owned();
            self.latent_stats.invert(&mut part);
            let mut x = from_tensor(&self.decode_tensor(&to_tensor(part)));
            self.input_stats.invert(&mut x);
            out.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&x);
        }
        Ok(out)
    }

    /// Relative Frobenius reconstruction error on physical fields.
    pub fn reconstruction_error(&self, x: ArrayView4<'_, f64>) -> Result<f64> {
        let z = self.encode(x)?;
        let r = self.decode(z.view())?;
        let num: f64 = r.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = x.iter().map(|b| b * b).sum();
        Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
    }
}

const CHUNK: usize = 64;

pub(crate) fn to_tensor(a: Array4<f64>) -> Tensor {
    let shape = a.shape().to_vec();
    let data = if a.is_standard_layout() { a.into_raw_vec_and_offset().0 } else { a.iter().copied().collect() };
    Tensor::from_vec(data, &shape)
}

pub(crate) fn from_tensor(t: &Tensor) -> Array4<f64> {
    let s = t.shape();
    Array4::from_shape_vec((s[0], s[1], s[2], s[3]), t.to_vec()).expect("tensor shape is 4D")
}

impl Module for Autoencoder {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.enc_in.visit_params(&join(prefix, "encoder.input"), f);
        for (i, (res, down)) in self.enc_stages.iter().enumerate() {
            res.visit(&join(prefix, &format!("encoder.stages.{i}.res")), f);
            down.visit_params(&join(prefix, &format!("encoder.stages.{i}.down")), f);
        }
        self.enc_mid.visit(&join(prefix, "encoder.mid"), f);
        self.enc_out.visit_params(&join(prefix, "encoder.output"), f);
        self.dec_in.visit_params(&join(prefix, "decoder.input"), f);
        self.dec_mid.visit(&join(prefix, "decoder.mid"), f);
        for (i, (conv, res)) in self.dec_stages.iter().enumerate() {
            conv.visit_params(&join(prefix, &format!("decoder.stages.{i}.up")), f);
            res.visit(&join(prefix, &format!("decoder.stages.{i}.res")), f);
        }
        self.dec_out.visit_params(&join(prefix, "decoder.output"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig { steps: 1500, batch_size: 16, lr: 2e-3, clip_norm: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AeHistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_rel_error: Option<f64>,
}

/// Fits the autoencoder on physical frames `[N, C, H, W]` and then sets the
/// latent statistics from the encoded training frames.
///
/// `on_row` is called for every logged row; validation error is measured on
/// `val` every `eval_every` steps and at the end.
pub fn train_autoencoder(
    ae: &mut Autoencoder,
    train: ArrayView4<'_, f64>,
    val: Option<ArrayView4<'_, f64>>,
    cfg: &AeTrainConfig,
    eval_every: usize,
    mut on_row: impl FnMut(&AeHistoryRow),
) -> Result<Vec<AeHistoryRow>> {
    ae.check_input(&train)?;
    let n = train.shape()[0];
    if n == 0 || cfg.batch_size == 0 {
        return Err(CoreError::InvalidArgument("autoencoder training needs data and a positive batch size".into()));
    }
    ae.input_stats = ChannelStats::fit(train);
    ae.latent_stats = ChannelStats::identity(ae.latent_channels());
    let mut norm = train.to_owned();
    ae.input_stats.apply(&mut norm);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut history = Vec::new();
    let s = norm.shape().to_vec();
    let frame = s[1] * s[2] * s[3];
    let flat = norm.as_slice().expect("owned arrays are contiguous");
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size * frame);
        for _ in 0..cfg.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            batch.extend_from_slice(&flat[i * frame..(i + 1) * frame]);
        }
        let b = batch.len() / frame;
        let x = Tensor::from_vec(batch, &[b, s[1], s[2], s[3]]);
        let loss = mse(&ae.decode_tensor(&ae.encode_tensor(&x)), &x);
        let value = loss.item();
        if !value.is_finite() {
            return Err(CoreError::Diverged { step, what: format!("autoencoder loss {value}") });
        }
        let mut grads = loss.backward();
        grads.clip_global_norm(cfg.clip_norm);
        opt.step(&ae.params(), &grads);
        let val_rel_error = match val {
            Some(v) if step % eval_every.max(1) == 0 || step == cfg.steps => Some(ae.reconstruction_error(v)?),
            _ => None,
        };
        let row = AeHistoryRow { step, train_loss: value, val_rel_error };
        on_row(&row);
        history.push(row);
    }
    let z = ae.encode(train)?;
    ae.latent_stats = ChannelStats::fit(z.view());
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn smooth(n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((n, c, h, w), |(b, ch, i, j)| {
            let (x, y) = (i as f64 / h as f64, j as f64 / w as f64);
            let phase = b as f64 * 0.7 + ch as f64;
            (2.0 * std::f64::consts::PI * (x + phase)).sin() * (2.0 * std::f64::consts::PI * y).cos() + 0.3 * b as f64
        })
    }

    #[test]
    fn shapes_follow_depth() {
        let ae = Autoencoder::new(&AeConfig::default(), 2, 0).unwrap();
        assert_eq!(ae.latent_channels(), 8);
        let z = ae.encode(smooth(3, 2, 16, 16).view()).unwrap();
        assert_eq!(z.shape(), &[3, 8, 4, 4]);
        assert_eq!(ae.decode(z.view()).unwrap().shape(), &[3, 2, 16, 16]);
        assert!(ae.encode(smooth(1, 2, 18, 16).view()).is_err());
        assert!(ae.encode(smooth(1, 1, 16, 16).view()).is_err());
    }

    #[test]
    fn one_step_reduces_loss() {
        let ae = Autoencoder::new(&AeConfig::default(), 1, 1).unwrap();
        let data = smooth(4, 1, 8, 8);
        let x = to_tensor(data.clone());
        let loss = |ae: &Autoencoder| mse(&ae.decode_tensor(&ae.encode_tensor(&x)), &x).item();
        let before = loss(&ae);
        let l = mse(&ae.decode_tensor(&ae.encode_tensor(&x)), &x);
        let mut opt = Adam::new(1e-4);
        opt.step(&ae.params(), &l.backward());
        assert!(loss(&ae) < before);
    }

    #[test]
    fn group_norm_ignores_affine_input_changes() {
        let gn = GroupNorm::new(8, 16);
        let x: Vec<f64> = (0..2 * 16 * 4 * 4).map(|i| ((i * 37 % 101) as f64).sin()).collect();
        let a = gn.forward(&Tensor::from_vec(x.clone(), &[2, 16, 4, 4]));
        let shifted: Vec<f64> = x.iter().map(|v| 3.0 * v + 5.0).collect();
        let b = gn.forward(&Tensor::from_vec(shifted, &[2, 16, 4, 4]));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-4, "{p} vs {q}");
        }
    }

    #[test]
    fn channel_stats_roundtrip() {
        let x = smooth(5, 2, 4, 4);
        let st = ChannelStats::fit(x.view());
        let mut y = x.clone();
        st.apply(&mut y);
        let back = ChannelStats::fit(y.view());
        for c in 0..2 {
            assert!(back.mean[c].abs() < 1e-12 && (back.std[c] - 1.0).abs() < 1e-12);
        }
        st.invert(&mut y);
        assert!(y.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
