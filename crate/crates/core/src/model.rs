//! The conditioning stack and U-Net together with their parameters.

use jamodiff_tensor::{Array, Float, Graph, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{CharAttributes, Conditioner, ConditioningBundle, ConditioningConfig, LatentZ};
use crate::denoiser::{DenoiserConfig, UNet};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::image::GlyphImage;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conditioning: ConditioningConfig,
    pub denoiser: DenoiserConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.conditioning.validate()?;
        self.denoiser.validate()?;
        if self.conditioning.z_dim != self.denoiser.z_dim {
            return Err(Error::InvalidConfig(format!(
                "conditioning z_dim {} differs from denoiser z_dim {}",
                self.conditioning.z_dim, self.denoiser.z_dim
            )));
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        self.denoiser.image_size
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub cond: Conditioner,
    pub unet: UNet,
}

/// Stacks equally sized images into a `[B, 1, S, S]` array.
pub fn image_batch<F: Float>(images: &[&GlyphImage]) -> Array<F> {
    let side = images.first().map_or(0, |i| i.side());
    let data = images.iter().flat_map(|img| img.pixels().iter().map(|&v| F::lit(v))).collect();
    Array::new([images.len(), 1, side, side], data)
}

impl Model {
    /// Builds freshly initialized parameters; layer creation order is fixed,
    /// so a seed determines every initial value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cond = Conditioner::new(&mut params, config.conditioning.clone(), &mut rng)?;
        let unet = UNet::new(&mut params, config.denoiser.clone(), &mut rng)?;
        Ok(Self { config, params, cond, unet })
    }

    pub fn check_image(&self, img: &GlyphImage) -> Result<()> {
        let s = self.config.image_size();
        if img.side() != s {
            return Err(Error::BadImageShape { expected: format!("{s}x{s}"), got: format!("{0}x{0}", img.side()) });
        }
        Ok(())
    }

    /// Conditioning embeddings for each character; style references are in `[-1, 1]`.
    pub fn bundles(&self, attrs: &[CharAttributes], style_refs: &[GlyphImage]) -> Result<Vec<ConditioningBundle>> {
        if attrs.len() != style_refs.len() {
            return Err(Error::InvalidConfig("one style reference per character is required".into()));
        }
        for img in style_refs {
            self.check_image(img)?;
        }
        let mut g = Graph::new(&self.params);
        let refs = g.input(image_batch(&style_refs.iter().collect::<Vec<_>>()));
        let nodes = self.cond.encode(&mut g, attrs, refs)?;
        Ok(nodes.to_values(&g))
    }

    pub fn latents(&self, attrs: &[CharAttributes], style_refs: &[GlyphImage]) -> Result<Vec<LatentZ>> {
        self.bundles(attrs, style_refs)?.iter().map(|b| self.cond.fuse_values(&self.params, b)).collect()
    }
}

impl Denoiser for Model {
    fn predict_noise(&self, x_t: &[GlyphImage], t: usize, z: &[LatentZ]) -> Result<Vec<GlyphImage>> {
        if x_t.len() != z.len() {
            return Err(Error::InvalidConfig(format!("{} images but {} latents", x_t.len(), z.len())));
        }
        for img in x_t {
            self.check_image(img)?;
        }
        let zd = self.config.denoiser.z_dim;
        if let Some(bad) = z.iter().find(|z| z.len() != zd) {
            return Err(Error::InvalidDim(format!("latent has length {}, expected {zd}", bad.len())));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(image_batch(&x_t.iter().collect::<Vec<_>>()));
        let zs =
            g.input(Array::new([z.len(), zd], z.iter().flat_map(|z| z.values().iter().map(|&v| v as f32)).collect()));
        let out = self.unet.forward(&mut g, x, &vec![t; x_t.len()], zs, None)?;
        let side = self.config.image_size();
        g.value(out)
            .data()
            .chunks(side * side)
            .map(|c| GlyphImage::new(side, c.iter().map(|&v| v as f64).collect()))
            .collect()
    }
}
