//! Character attribute encoders and their fusion into the latent `z`.
//!
//! Four embeddings describe a target glyph: a content code looked up by
//! charset index, a style code from one reference image, a stroke embedding
//! from per-jamo stroke counts, and a text embedding from the three jamo
//! tokens. They are concatenated and mapped to `z` by one affine layer.

use jamodiff_tensor::nn::{Conv2d, Embedding, GroupNorm, Linear};
use jamodiff_tensor::{Array, Float, Graph, NodeId, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hangul::{StrokeVector, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    pub charset_size: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub stroke_dim: usize,
    pub text_dim: usize,
    pub z_dim: usize,
    /// Hidden widths of the style encoder; a final block maps to `style_dim`.
    pub style_widths: Vec<usize>,
    /// Stroke counts are divided by this before the affine layer.
    pub stroke_norm: f64,
    /// Replaces the text embedding with zeros (ablation runs).
    pub zero_text: bool,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            charset_size: 2350,
            content_dim: 128,
            style_dim: 128,
            stroke_dim: 32,
            text_dim: 128,
            z_dim: 256,
            style_widths: vec![32, 64, 128],
            stroke_norm: 16.0,
            zero_text: false,
        }
    }
}

impl ConditioningConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("charset_size", self.charset_size),
            ("content_dim", self.content_dim),
            ("style_dim", self.style_dim),
            ("stroke_dim", self.stroke_dim),
            ("text_dim", self.text_dim),
            ("z_dim", self.z_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.style_widths.contains(&0) {
            return Err(Error::InvalidConfig("style widths must be positive".into()));
        }
        if !(self.stroke_norm > 0.0 && self.stroke_norm.is_finite()) {
            return Err(Error::InvalidConfig("stroke_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn bundle_dim(&self) -> usize {
        self.content_dim + self.style_dim + self.stroke_dim + self.text_dim
    }
}

/// Fused conditioning vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentZ {
    values: Vec<f64>,
}

impl LatentZ {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The four per-character embeddings before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub content_code: Vec<f64>,
    pub style_code: Vec<f64>,
    pub stroke_embed: Vec<f64>,
    pub text_embed: Vec<f64>,
}

/// Graph nodes of a batch of bundles, each `[B, D_part]`.
#[derive(Clone, Copy, Debug)]
pub struct BundleNodes {
    pub content: NodeId,
    pub style: NodeId,
    pub stroke: NodeId,
    pub text: NodeId,
}

/// Non-image inputs describing one target character.
#[derive(Clone, Debug, PartialEq)]
pub struct CharAttributes {
    /// Row in the content table; `None` for characters outside the charset,
    /// which get an all-zero content code.
    pub char_index: Option<usize>,
    pub tokens: [usize; 3],
    pub strokes: StrokeVector,
}

pub(crate) fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap()
}

/// Strided convolution blocks followed by global average pooling.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    blocks: Vec<(Conv2d, GroupNorm)>,
}

impl StyleEncoder {
    fn new<F: Float, R: Rng + ?Sized>(ps: &mut ParamStore<F>, cfg: &ConditioningConfig, rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        let mut in_ch = 1;
        let widths = cfg.style_widths.iter().copied().chain(std::iter::once(cfg.style_dim));
        for (i, out) in widths.enumerate() {
            let conv = Conv2d::new(ps, &format!("cond.style.block{i}.conv"), in_ch, out, 3, 2, 1, rng);
            let norm = GroupNorm::new(ps, &format!("cond.style.block{i}.norm"), out, norm_groups(out));
            blocks.push((conv, norm));
            in_ch = out;
        }
        Self { blocks }
    }

    /// `x [B, 1, H, W] -> [B, style_dim]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: NodeId) -> NodeId {
        let mut h = x;
        for (conv, norm) in &self.blocks {
            h = conv.forward(g, h);
            h = norm.forward(g, h);
            h = g.silu(h);
        }
        g.global_avg_pool(h)
    }
}

/// Parameter handles of the full conditioning stack.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub config: ConditioningConfig,
    text_table: Embedding,
    text_proj: Linear,
    content_table: Embedding,
    stroke_proj: Linear,
    style: StyleEncoder,
    fuse_proj: Linear,
}

impl Conditioner {
    pub fn new<F: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<F>,
        config: ConditioningConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let text_table = Embedding::new(ps, "cond.text.embed", VOCAB_SIZE, config.text_dim, rng);
        let text_proj = Linear::new(ps, "cond.text.proj", config.text_dim, config.text_dim, rng);
        let content_table = Embedding::new(ps, "cond.content.embed", config.charset_size, config.content_dim, rng);
        let stroke_proj = Linear::new(ps, "cond.stroke.proj", 3, config.stroke_dim, rng);
        let style = StyleEncoder::new(ps, &config, rng);
        let fuse_proj = Linear::new(ps, "cond.fuse.proj", config.bundle_dim(), config.z_dim, rng);
        Ok(Self { config, text_table, text_proj, content_table, stroke_proj, style, fuse_proj })
    }

    /// Sum of the three token embeddings, then affine + SiLU: `[B, text_dim]`.
    pub fn encode_text<F: Float>(&self, g: &mut Graph<'_, F>, tokens: &[[usize; 3]]) -> Result<NodeId> {
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::UnknownToken(bad));
        }
        let ids = tokens.iter().map(|t| t.to_vec()).collect();
        let summed = self.text_table.forward_sum(g, ids);
        let h = self.text_proj.forward(g, summed);
        Ok(g.silu(h))
    }

    /// Row lookup in the content table; `None` rows are zero: `[B, content_dim]`.
    pub fn encode_content<F: Float>(&self, g: &mut Graph<'_, F>, indices: &[Option<usize>]) -> Result<NodeId> {
        let size = self.config.charset_size;
        if let Some(&index) = indices.iter().flatten().find(|&&i| i >= size) {
            return Err(Error::UnknownCharacter { index, size });
        }
        let ids = indices.iter().map(|i| i.iter().copied().collect()).collect();
        Ok(self.content_table.forward_sum(g, ids))
    }

    /// Normalized stroke counts through affine + SiLU: `[B, stroke_dim]`.
    pub fn encode_strokes<F: Float>(&self, g: &mut Graph<'_, F>, strokes: &[StrokeVector]) -> NodeId {
        let norm = self.config.stroke_norm;
        let data = strokes.iter().flat_map(|s| s.counts.map(|c| F::lit(c as f64 / norm))).collect();
        let x = g.input(Array::new([strokes.len(), 3], data));
        let h = self.stroke_proj.forward(g, x);
        g.silu(h)
    }

    /// Style codes for `[B, 1, H, W]` reference images in `[-1, 1]`.
    pub fn encode_style<F: Float>(&self, g: &mut Graph<'_, F>, images: NodeId) -> Result<NodeId> {
        let shape = g.shape(images);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != shape[3] || shape[2] == 0 {
            return Err(Error::BadImageShape { expected: "[B, 1, S, S]".into(), got: format!("{shape:?}") });
        }
        Ok(self.style.forward(g, images))
    }

    /// All four embeddings for a batch.
    pub fn encode<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        attrs: &[CharAttributes],
        style_refs: NodeId,
    ) -> Result<BundleNodes> {
        let content = self.encode_content(g, &attrs.iter().map(|a| a.char_index).collect::<Vec<_>>())?;
        let style = self.encode_style(g, style_refs)?;
        let stroke = self.encode_strokes(g, &attrs.iter().map(|a| a.strokes).collect::<Vec<_>>());
        let text = if self.config.zero_text {
            g.input(Array::zeros([attrs.len(), self.config.text_dim]))
        } else {
            self.encode_text(g, &attrs.iter().map(|a| a.tokens).collect::<Vec<_>>())?
        };
        Ok(BundleNodes { content, style, stroke, text })
    }

    /// Concatenation, then affine + SiLU: `[B, z_dim]`.
    pub fn fuse<F: Float>(&self, g: &mut Graph<'_, F>, bundle: BundleNodes) -> Result<NodeId> {
        let c = &self.config;
        let parts = [
            ("content_code", bundle.content, c.content_dim),
            ("style_code", bundle.style, c.style_dim),
            ("stroke_embed", bundle.stroke, c.stroke_dim),
            ("text_embed", bundle.text, c.text_dim),
        ];
        let batch = g.shape(bundle.content)[0];
        for (part, node, expected) in parts {
            let shape = g.shape(node);
            if shape.len() != 2 || shape[0] != batch || shape[1] != expected {
                let got = shape.get(1).copied().unwrap_or(0);
                return Err(Error::BundleShapeMismatch { part, expected, got });
            }
        }
        let joined = g.concat(&parts.map(|p| p.1));
        let h = self.fuse_proj.forward(g, joined);
        Ok(g.silu(h))
    }

    /// Fuses an already computed bundle outside of any training graph.
    pub fn fuse_values(&self, ps: &ParamStore<f32>, bundle: &ConditioningBundle) -> Result<LatentZ> {
        let mut g = Graph::new(ps);
        let mut row = |v: &[f64]| g.input(Array::new([1, v.len()], v.iter().map(|&x| x as f32).collect()));
        let nodes = BundleNodes {
            content: row(&bundle.content_code),
            style: row(&bundle.style_code),
            stroke: row(&bundle.stroke_embed),
            text: row(&bundle.text_embed),
        };
        let z = self.fuse(&mut g, nodes)?;
        Ok(LatentZ::new(g.value(z).data().iter().map(|&v| v as f64).collect()))
    }
}

/// Splits a `[B, D]` node into per-row `f64` vectors.
pub(crate) fn rows<F: Float>(g: &Graph<'_, F>, node: NodeId) -> Vec<Vec<f64>> {
    let v = g.value(node);
    let d = v.shape()[1];
    v.data().chunks(d).map(|r| r.iter().map(|x| x.to_f64().unwrap()).collect()).collect()
}

impl BundleNodes {
    pub fn to_values<F: Float>(&self, g: &Graph<'_, F>) -> Vec<ConditioningBundle> {
        let (c, s, k, t) = (rows(g, self.content), rows(g, self.style), rows(g, self.stroke), rows(g, self.text));
        c.into_iter()
            .zip(s)
            .zip(k)
            .zip(t)
            .map(|(((content_code, style_code), stroke_embed), text_embed)| ConditioningBundle {
                content_code,
                style_code,
                stroke_embed,
                text_embed,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::hangul::{decompose, jamo_token_ids, stroke_vector, StrokeTable};

    fn small() -> ConditioningConfig {
        ConditioningConfig {
            charset_size: 10,
            content_dim: 4,
            style_dim: 6,
            stroke_dim: 3,
            text_dim: 5,
            z_dim: 7,
            style_widths: vec![4],
            ..Default::default()
        }
    }

    fn setup() -> (ParamStore<f64>, Conditioner) {
        let mut ps = ParamStore::new();
        let cond = Conditioner::new(&mut ps, small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (ps, cond)
    }

    fn zero_params(ps: &mut ParamStore<f64>, prefix: &str) {
        let ids: Vec<_> = ps.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id).collect();
        for id in ids {
            ps.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn text_encoder_with_zero_table_ignores_tokens() {
        let (mut ps, cond) = setup();
        zero_params(&mut ps, "cond.text.embed");
        let mut g = Graph::new(&ps);
        let out = cond.encode_text(&mut g, &[[0, 19, 40], [18, 40, 67]]).unwrap();
        let r = rows(&g, out);
        assert_eq!(r[0], r[1]);
        let bias = ps.get(ps.id("cond.text.proj.bias").unwrap()).data().to_vec();
        for (v, b) in r[0].iter().zip(bias) {
            assert!((v - b / (1.0 + (-b).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn text_encoder_depends_only_on_tokens() {
        let (ps, cond) = setup();
        let t = jamo_token_ids(decompose('한').unwrap()).unwrap();
        let mut g = Graph::new(&ps);
        let out = cond.encode_text(&mut g, &[t, t, [0, 19, 40]]).unwrap();
        let r = rows(&g, out);
        assert_eq!(r[0], r[1]);
        assert_ne!(r[0], r[2]);
        assert!(matches!(cond.encode_text(&mut g, &[[0, 19, 68]]), Err(Error::UnknownToken(68))));
    }

    #[test]
    fn content_lookup() {
        let (ps, cond) = setup();
        let mut g = Graph::new(&ps);
        let out = cond.encode_content(&mut g, &[Some(3), Some(3), Some(4), None]).unwrap();
        let r = rows(&g, out);
        assert_eq!(r[0], r[1]);
        assert_ne!(r[0], r[2]);
        assert!(r[3].iter().all(|&v| v == 0.0));
        assert!(matches!(
            cond.encode_content(&mut g, &[Some(10)]),
            Err(Error::UnknownCharacter { index: 10, size: 10 })
        ));
    }

    #[test]
    fn content_gradient_touches_only_the_looked_up_row() {
        let (ps, cond) = setup();
        let mut g = Graph::new(&ps);
        let out = cond.encode_content(&mut g, &[Some(6)]).unwrap();
        let loss = g.mean_square(out);
        let grads = g.backward(loss);
        let table = grads.param(ps.id("cond.content.embed.table").unwrap()).unwrap();
        for (row, chunk) in table.chunks(4).enumerate() {
            assert_eq!(chunk.iter().any(|&v| v != 0.0), row == 6, "row {row}");
        }
    }

    #[test]
    fn stroke_encoder_is_not_scale_invariant() {
        let (ps, cond) = setup();
        let mut g = Graph::new(&ps);
        let out = cond.encode_strokes(&mut g, &[StrokeVector::new([1, 2, 0]), StrokeVector::new([2, 4, 0])]);
        let r = rows(&g, out);
        assert_ne!(r[0], r[1]);
        let (mut ps, cond) = setup();
        zero_params(&mut ps, "cond.stroke.proj.weight");
        let mut g = Graph::new(&ps);
        let table = StrokeTable::bundled();
        let a = stroke_vector(decompose('가').unwrap(), &table).unwrap();
        let b = stroke_vector(decompose('힣').unwrap(), &table).unwrap();
        let out = cond.encode_strokes(&mut g, &[a, b]);
        let r = rows(&g, out);
        assert_eq!(r[0], r[1]);
    }

    #[test]
    fn style_code_length_is_independent_of_image_size() {
        let (ps, cond) = setup();
        for side in [32, 64, 128] {
            let mut g = Graph::new(&ps);
            let x = g.input(Array::full([2, 1, side, side], 0.3));
            let out = cond.encode_style(&mut g, x).unwrap();
            assert_eq!(g.shape(out), &[2, 6]);
        }
        let mut g = Graph::new(&ps);
        let x = g.input(Array::zeros([1, 2, 8, 8]));
        assert!(matches!(cond.encode_style(&mut g, x), Err(Error::BadImageShape { .. })));
    }

    #[test]
    fn fuse_checks_lengths_and_uses_every_part() {
        let (ps, cond) = setup();
        let base = ConditioningBundle {
            content_code: vec![0.1; 4],
            style_code: vec![0.2; 6],
            stroke_embed: vec![0.3; 3],
            text_embed: vec![0.4; 5],
        };
        let ps32 = ps.cast::<f32>();
        let z0 = cond.fuse_values(&ps32, &base).unwrap();
        assert_eq!(z0.len(), 7);
        let mut variants = vec![base.clone(); 4];
        variants[0].content_code[0] += 1.0;
        variants[1].style_code[1] += 1.0;
        variants[2].stroke_embed[2] += 1.0;
        variants[3].text_embed[3] += 1.0;
        for v in &variants {
            assert_ne!(cond.fuse_values(&ps32, v).unwrap(), z0);
        }
        let mut bad = base.clone();
        bad.text_embed.push(0.0);
        assert!(matches!(
            cond.fuse_values(&ps32, &bad),
            Err(Error::BundleShapeMismatch { part: "text_embed", expected: 5, got: 6 })
        ));
    }

    #[test]
    fn fuse_with_zero_weights_returns_activated_bias() {
        let (mut ps, cond) = setup();
        zero_params(&mut ps, "cond.fuse.proj.weight");
        let bundle = ConditioningBundle {
            content_code: vec![1.0; 4],
            style_code: vec![-1.0; 6],
            stroke_embed: vec![2.0; 3],
            text_embed: vec![0.5; 5],
        };
        let z = cond.fuse_values(&ps.cast(), &bundle).unwrap();
        let bias = ps.get(ps.id("cond.fuse.proj.bias").unwrap()).data();
        for (v, &b) in z.values().iter().zip(bias) {
            let expect = (b as f32) / (1.0 + (-(b as f32)).exp());
            assert!((v - expect as f64).abs() < 1e-6);
        }
    }
}
