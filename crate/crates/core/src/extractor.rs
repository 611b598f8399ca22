//! Frozen feature extractors used by the perceptual loss and the metrics.
//!
//! An extractor maps a `[B, 1, S, S]` batch in `[-1, 1]` to one or more
//! feature maps. Its weights enter the graph as constants, so no gradient
//! ever reaches them; gradients still flow through to the input.

use std::path::Path;

use jamodiff_tensor::nn::{Conv2d, Linear};
use jamodiff_tensor::{AdamW, AdamWConfig, Float, Graph, NodeId, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::image::GlyphImage;
use crate::model::image_batch;

pub trait FeatureExtractor<F: Float> {
    fn feature_maps(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<Vec<NodeId>>;

    /// Stable digest of the extractor's architecture and weights.
    fn identity_hash(&self) -> String;
}

/// A single layer holding the raw pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<F: Float> FeatureExtractor<F> for IdentityExtractor {
    fn feature_maps(&self, _g: &mut Graph<'_, F>, x: NodeId) -> Result<Vec<NodeId>> {
        Ok(vec![x])
    }

    fn identity_hash(&self) -> String {
        hex_digest(Sha256::digest(b"identity"))
    }
}

fn hex_digest(bytes: impl AsRef<[u8]>) -> String {
    bytes.as_ref().iter().map(|b| format!("{b:02x}")).collect()
}

pub const EXTRACTOR_KIND: &str = "extractor";
pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];

/// Stride-2 3x3 convolutions with ReLU; every block output is a feature map.
#[derive(Clone, Debug)]
pub struct ConvExtractor {
    widths: Vec<usize>,
    params: ParamStore<f32>,
    convs: Vec<Conv2d>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self { iterations: 300, batch_size: 32, lr: 1e-3, seed: 0 }
    }
}

impl ConvExtractor {
    fn build(ps: &mut ParamStore<f32>, widths: &[usize], rng: &mut ChaCha8Rng) -> Vec<Conv2d> {
        let mut in_ch = 1;
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv2d::new(ps, &format!("extractor.block{i}"), in_ch, w, 3, 2, 1, rng);
                in_ch = w;
                conv
            })
            .collect()
    }

    /// Randomly initialized weights (no training).
    pub fn random(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let convs = Self::build(&mut params, widths, &mut rng);
        Self { widths: widths.to_vec(), params, convs }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn forward_maps<F: Float>(convs: &[Conv2d], ps: &ParamStore<f32>, g: &mut Graph<'_, F>, x: NodeId) -> Vec<NodeId> {
        let mut h = x;
        let mut maps = Vec::with_capacity(convs.len());
        for conv in convs {
            let w = g.input(ps.get(conv.weight).cast());
            let b = conv.bias.map(|b| g.input(ps.get(b).cast()));
            h = g.conv2d(h, w, b, conv.stride, conv.pad);
            h = g.relu(h);
            maps.push(h);
        }
        maps
    }

    /// Trains the blocks plus a linear head as a classifier, then drops the head.
    /// Returns the extractor and the per-iteration cross-entropy.
    pub fn pretrain(
        images: &[GlyphImage],
        labels: &[usize],
        widths: &[usize],
        cfg: &ExtractorTrainConfig,
    ) -> Result<(Self, Vec<f64>)> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::EmptyDataset("extractor pretraining needs one label per image".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        let classes = labels.iter().max().unwrap() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamStore::new();
        let convs = Self::build(&mut ps, widths, &mut rng);
        let head = Linear::new(&mut ps, "extractor.head", *widths.last().unwrap(), classes, &mut rng);
        let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..Default::default() }, &ps);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut cursor = order.len();
        let mut history = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(images.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let grads = {
                let mut g = Graph::new(&ps);
                let x = g.input(image_batch::<f32>(&batch.iter().map(|&i| &images[i]).collect::<Vec<_>>()));
                let mut h = x;
                for conv in &convs {
                    h = conv.forward(&mut g, h);
                    h = g.relu(h);
                }
                let pooled = g.global_avg_pool(h);
                let logits = head.forward(&mut g, pooled);
                let loss = g.cross_entropy(logits, &batch.iter().map(|&i| labels[i]).collect::<Vec<_>>());
                history.push(g.value(loss).item() as f64);
                g.backward(loss).into_param_grads()
            };
            opt.step(&mut ps, &grads);
        }
        let mut params = ParamStore::new();
        for (_, name, value) in ps.iter().filter(|(_, n, _)| !n.starts_with("extractor.head")) {
            params.add(name, value.clone());
        }
        Ok((Self { widths: widths.to_vec(), params, convs }, history))
    }

    pub fn to_file(&self) -> TensorFile {
        TensorFile {
            kind: EXTRACTOR_KIND.into(),
            meta: serde_json::json!({ "widths": self.widths }),
            tensors: self.params.iter().map(|(_, n, a)| (n.to_string(), a.clone())).collect(),
        }
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        let widths: Vec<usize> = serde_json::from_value(file.meta["widths"].clone())?;
        let mut fresh = Self::random(&widths, 0);
        for (id, name, value) in
            fresh.params.iter().map(|(i, n, v)| (i, n.to_string(), v.shape().to_vec())).collect::<Vec<_>>()
        {
            let stored = file.tensor(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if stored.shape() != value.as_slice() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {value:?}", stored.shape())));
            }
            *fresh.params.get_mut(id) = stored.clone();
        }
        if file.tensors.len() != fresh.params.len() {
            return Err(Error::Format("unexpected tensors in extractor file".into()));
        }
        Ok(fresh)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&TensorFile::read(path, EXTRACTOR_KIND)?)
    }
}

impl<F: Float> FeatureExtractor<F> for ConvExtractor {
    fn feature_maps(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<Vec<NodeId>> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::BadImageShape { expected: "[B, 1, S, S]".into(), got: format!("{shape:?}") });
        }
        Ok(Self::forward_maps(&self.convs, &self.params, g, x))
    }

    fn identity_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"conv");
        for w in &self.widths {
            h.update((*w as u64).to_le_bytes());
        }
        for (_, name, value) in self.params.iter() {
            h.update(name.as_bytes());
            for v in value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h.finalize())
    }
}

/// Per-image embedding: global average of the last feature map. Images are in `[-1, 1]`.
pub fn embeddings(extractor: &dyn FeatureExtractor<f32>, images: &[GlyphImage]) -> Result<Vec<Vec<f64>>> {
    let ps = ParamStore::<f32>::new();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut g = Graph::new(&ps);
        let x = g.input(image_batch(&chunk.iter().collect::<Vec<_>>()));
        let maps = extractor.feature_maps(&mut g, x)?;
        let last = *maps.last().ok_or_else(|| Error::InvalidConfig("extractor produced no feature maps".into()))?;
        let pooled = g.global_avg_pool(last);
        out.extend(crate::conditioning::rows(&g, pooled));
    }
    Ok(out)
}
