//! Conditional U-Net noise predictor `eps(x_t, t, z)`.
//!
//! Each resolution level has one residual block; the time embedding and a
//! projection of `z` are summed into one conditioning vector that drives a
//! per-channel scale and shift after the second normalization of every
//! residual block. Self-attention runs only in the middle block at the
//! lowest resolution.

use jamodiff_tensor::nn::{Conv2d, GroupNorm, Linear};
use jamodiff_tensor::{Array, Float, Graph, NodeId, ParamStore};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::conditioning::norm_groups;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub z_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { image_size: 32, base_channels: 32, channel_mults: vec![1, 2], time_embed_dim: 64, z_dim: 256 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::InvalidConfig("channel_mults must not be empty".into()));
        }
        let positive = [self.image_size, self.base_channels, self.time_embed_dim, self.z_dim];
        if positive.contains(&0) || self.channel_mults.contains(&0) {
            return Err(Error::InvalidConfig("denoiser dimensions must be positive".into()));
        }
        let factor = 1 << (self.channel_mults.len() - 1);
        if !self.image_size.is_multiple_of(factor) {
            return Err(Error::InvalidConfig(format!(
                "image_size {} is not divisible by {factor} for {} levels",
                self.image_size,
                self.channel_mults.len()
            )));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidDim(format!("time_embed_dim {} is odd", self.time_embed_dim)));
        }
        Ok(())
    }
}

/// Sinusoidal embedding `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with
/// `w_i = 10000^(-i / (dim/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidDim(format!("time embedding dimension {dim} must be positive and even")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Dropout settings for a training forward pass.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply<F: Float>(&mut self, g: &mut Graph<'_, F>, x: NodeId) -> NodeId {
        if self.p <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.p;
        let scale = F::lit(1.0 / keep);
        let n = g.value(x).len();
        let mask = (0..n).map(|_| if self.rng.random::<f64>() < keep { scale } else { F::zero() }).collect();
        g.mul_const(x, mask)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    modulation: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<F: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), in_ch, norm_groups(in_ch)),
            conv1: Conv2d::same3(ps, &format!("{name}.conv1"), in_ch, out_ch, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), out_ch, norm_groups(out_ch)),
            modulation: Linear::new(ps, &format!("{name}.modulation"), cond_dim, 2 * out_ch, rng),
            conv2: Conv2d::same3(ps, &format!("{name}.conv2"), out_ch, out_ch, rng),
            skip: (in_ch != out_ch).then(|| Conv2d::new(ps, &format!("{name}.skip"), in_ch, out_ch, 1, 1, 0, rng)),
        }
    }

    fn forward<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        x: NodeId,
        cond_act: NodeId,
        dropout: &mut Option<Dropout<'_>>,
    ) -> NodeId {
        let mut h = self.norm1.forward(g, x);
        h = g.silu(h);
        h = self.conv1.forward(g, h);
        h = self.norm2.forward(g, h);
        let ss = self.modulation.forward(g, cond_act);
        h = g.modulate(h, ss);
        h = g.silu(h);
        if let Some(d) = dropout {
            h = d.apply(g, h);
        }
        h = self.conv2.forward(g, h);
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl Attention {
    fn new<F: Float, R: Rng + ?Sized>(ps: &mut ParamStore<F>, name: &str, ch: usize, rng: &mut R) -> Self {
        let mut conv = |part: &str| Conv2d::new(ps, &format!("{name}.{part}"), ch, ch, 1, 1, 0, rng);
        let (q, k, v, proj) = (conv("q"), conv("k"), conv("v"), conv("proj"));
        Self { norm: GroupNorm::new(ps, &format!("{name}.norm"), ch, norm_groups(ch)), q, k, v, proj }
    }

    fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: NodeId) -> NodeId {
        let shape = g.shape(x).to_vec();
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let h = self.norm.forward(g, x);
        let flat = |g: &mut Graph<'_, F>, conv: &Conv2d| {
            let y = conv.forward(g, h);
            g.reshape(y, &[b, c, hw])
        };
        let (q, k, v) = (flat(g, &self.q), flat(g, &self.k), flat(g, &self.v));
        let scores = g.batch_matmul(q, k, true, false);
        let scores = g.scale(scores, F::lit(1.0 / (c as f64).sqrt()));
        let attn = g.softmax(scores);
        let out = g.batch_matmul(v, attn, false, true);
        let out = g.reshape(out, &shape);
        let out = self.proj.forward(g, out);
        g.add(out, x)
    }
}

/// Parameter handles of the U-Net.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: DenoiserConfig,
    time_mlp: (Linear, Linear),
    z_proj: Linear,
    conv_in: Conv2d,
    down: Vec<(ResBlock, Option<Conv2d>)>,
    mid: (ResBlock, Attention, ResBlock),
    up: Vec<(ResBlock, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new<F: Float, R: Rng + ?Sized>(ps: &mut ParamStore<F>, config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let e = config.time_embed_dim;
        let time_mlp = (Linear::new(ps, "unet.time.fc1", e, e, rng), Linear::new(ps, "unet.time.fc2", e, e, rng));
        let z_proj = Linear::new(ps, "unet.z_proj", config.z_dim, e, rng);
        let base = config.base_channels;
        let conv_in = Conv2d::same3(ps, "unet.conv_in", 1, base, rng);
        let widths: Vec<usize> = config.channel_mults.iter().map(|m| m * base).collect();
        let levels = widths.len();
        let mut down = Vec::new();
        let mut ch = base;
        for (i, &w) in widths.iter().enumerate() {
            let res = ResBlock::new(ps, &format!("unet.down{i}.res"), ch, w, e, rng);
            let sample =
                (i + 1 < levels).then(|| Conv2d::new(ps, &format!("unet.down{i}.downsample"), w, w, 3, 2, 1, rng));
            down.push((res, sample));
            ch = w;
        }
        let mid = (
            ResBlock::new(ps, "unet.mid.res1", ch, ch, e, rng),
            Attention::new(ps, "unet.mid.attn", ch, rng),
            ResBlock::new(ps, "unet.mid.res2", ch, ch, e, rng),
        );
        let mut up = Vec::new();
        for (i, &w) in widths.iter().enumerate().rev() {
            let res = ResBlock::new(ps, &format!("unet.up{i}.res"), ch + w, w, e, rng);
            let sample = (i > 0).then(|| Conv2d::same3(ps, &format!("unet.up{i}.upsample"), w, w, rng));
            up.push((res, sample));
            ch = w;
        }
        let norm_out = GroupNorm::new(ps, "unet.norm_out", ch, norm_groups(ch));
        let conv_out = Conv2d::same3(ps, "unet.conv_out", ch, 1, rng);
        Ok(Self { config, time_mlp, z_proj, conv_in, down, mid, up, norm_out, conv_out })
    }

    /// `x [B, 1, S, S]`, one step per item, `z [B, z_dim]` -> predicted noise `[B, 1, S, S]`.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        x: NodeId,
        steps: &[usize],
        z: NodeId,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<NodeId> {
        let s = self.config.image_size;
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1..] != [1, s, s] {
            return Err(Error::BadImageShape { expected: format!("[B, 1, {s}, {s}]"), got: format!("{xs:?}") });
        }
        let b = xs[0];
        if steps.len() != b {
            return Err(Error::InvalidConfig(format!("{} steps for a batch of {b}", steps.len())));
        }
        if g.shape(z) != [b, self.config.z_dim] {
            return Err(Error::InvalidDim(format!("z must be [{b}, {}], got {:?}", self.config.z_dim, g.shape(z))));
        }
        let e = self.config.time_embed_dim;
        let mut temb = Vec::with_capacity(b * e);
        for &t in steps {
            temb.extend(time_embedding(t, e)?.into_iter().map(F::lit));
        }
        let temb = g.input(Array::new([b, e], temb));
        let mut c = self.time_mlp.0.forward(g, temb);
        c = g.silu(c);
        c = self.time_mlp.1.forward(g, c);
        let zp = self.z_proj.forward(g, z);
        let cond = g.add(c, zp);
        let cond_act = g.silu(cond);

        let mut h = self.conv_in.forward(g, x);
        let mut skips = Vec::with_capacity(self.down.len());
        for (res, sample) in &self.down {
            h = res.forward(g, h, cond_act, &mut dropout);
            skips.push(h);
            if let Some(conv) = sample {
                h = conv.forward(g, h);
            }
        }
        h = self.mid.0.forward(g, h, cond_act, &mut dropout);
        h = self.mid.1.forward(g, h);
        h = self.mid.2.forward(g, h, cond_act, &mut dropout);
        for (res, sample) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&[h, skip]);
            h = res.forward(g, h, cond_act, &mut dropout);
            if let Some(conv) = sample {
                h = g.upsample2x(h);
                h = conv.forward(g, h);
            }
        }
        h = self.norm_out.forward(g, h);
        h = g.silu(h);
        Ok(self.conv_out.forward(g, h))
    }
}
