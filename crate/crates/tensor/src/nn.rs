//! Parameterised layers built on [`Graph`] ops.
//!
//! Initialisation follows the usual fan-in uniform scheme
//! `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Array, Float, Graph, NodeId, ParamId, ParamStore};

pub fn uniform<F: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Array<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.random_range(-bound..=bound))).collect();
    Array::new(shape.to_vec(), data)
}

pub fn normal<F: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Array<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::lit(z * std)
        })
        .collect();
    Array::new(shape.to_vec(), data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), uniform(rng, &[out_dim, in_dim], bound));
        let bias = Some(ps.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound)));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), uniform(rng, &[out_ch, in_ch, kernel, kernel], bound));
        let bias = Some(ps.add(format!("{name}.bias"), uniform(rng, &[out_ch], bound)));
        Self { weight, bias, stride, pad }
    }

    /// 3x3 convolution that preserves spatial size at stride 1.
    pub fn same3<F: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(ps, name, in_ch, out_ch, 3, 1, 1, rng)
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels not divisible into {groups} groups");
        let gamma = ps.add(format!("{name}.gamma"), Array::full([channels], F::one()));
        let beta = ps.add(format!("{name}.beta"), Array::zeros([channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups, Self::EPS)
    }
}

/// Trainable lookup table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = ps.add(format!("{name}.table"), normal(rng, &[vocab, dim], 1.0));
        Self { table, vocab, dim }
    }

    /// Each output row sums the embeddings of its token list.
    pub fn forward_sum<F: Float>(&self, g: &mut Graph<'_, F>, ids: Vec<Vec<usize>>) -> NodeId {
        let t = g.param(self.table);
        g.embedding_sum(t, ids)
    }
}
