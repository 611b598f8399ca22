//! Image quality measures: RMSE, SSIM, a perceptual feature distance, and the
//! Fréchet distance between feature distributions.
//!
//! RMSE and SSIM take `[0, 1]` images. Feature-based measures feed images to
//! the extractor unchanged, so callers pass them in the extractor's input range
//! (`[-1, 1]` for extractors trained here); `evaluate_set` handles that conversion.

use std::collections::BTreeSet;
use std::path::Path;

use jamodiff_tensor::{Graph, ParamStore};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{embeddings, FeatureExtractor};
use crate::image::GlyphImage;
use crate::model::image_batch;

pub fn rmse(a: &GlyphImage, b: &GlyphImage) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.pixels().len() as f64;
    Ok((a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable filtering over the positions where the window fits entirely.
fn filter_valid(img: &[f64], side: usize, k: &[f64]) -> Vec<f64> {
    let w = k.len();
    let out = side - w + 1;
    let mut rows = vec![0.0; side * out];
    for r in 0..side {
        for c in 0..out {
            rows[r * out + c] = k.iter().enumerate().map(|(i, kv)| kv * img[r * side + c + i]).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for r in 0..out {
        for c in 0..out {
            res[r * out + c] = k.iter().enumerate().map(|(i, kv)| kv * rows[(r + i) * out + c]).sum();
        }
    }
    res
}

/// Mean of the local SSIM map under a Gaussian window.
pub fn ssim(a: &GlyphImage, b: &GlyphImage, cfg: &SsimConfig) -> Result<f64> {
    a.check_same_shape(b)?;
    let side = a.side();
    if cfg.window == 0 || side < cfg.window {
        return Err(Error::WindowTooLarge { side, window: cfg.window });
    }
    let k = gaussian_kernel(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let (x, y) = (a.pixels(), b.pixels());
    let prod = |f: &dyn Fn(usize) -> f64| filter_valid(&(0..x.len()).map(f).collect::<Vec<_>>(), side, &k);
    let mu_x = filter_valid(x, side, &k);
    let mu_y = filter_valid(y, side, &k);
    let xx = prod(&|i| x[i] * x[i]);
    let yy = prod(&|i| y[i] * y[i]);
    let xy = prod(&|i| x[i] * y[i]);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Gaussian summary of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    /// Mean and unbiased covariance of row vectors.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InsufficientSamples(n));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::InvalidStats("feature vectors must share a nonzero length".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        // Exact symmetry regardless of summation order.
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }

    fn check(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.shape() != (d, d) {
            return Err(Error::InvalidStats(format!("covariance is {:?} for a mean of length {d}", self.cov.shape())));
        }
        if !self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidStats("non-finite statistics".into()));
        }
        Ok(())
    }
}

/// Statistics of extractor embeddings (global average of the last feature map).
pub fn feature_stats(images: &[GlyphImage], extractor: &dyn FeatureExtractor<f32>) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::InsufficientSamples(images.len()));
    }
    FeatureStats::from_features(&embeddings(extractor, images)?)
}

/// Principal square root of a symmetric PSD matrix; tiny negative eigenvalues count as zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `tr((Σ1 Σ2)^{1/2})`, computed as `tr((√Σ1 Σ2 √Σ1)^{1/2})`, which has the same
/// eigenvalues but is symmetric. Returns `None` if the product is badly indefinite.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Option<f64> {
    let r1 = sqrt_psd(s1);
    let m = &r1 * s2 * &r1;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v < -1e-6 * scale) {
        return None;
    }
    Some(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// Regularization added to both covariances when the plain product is not usable.
pub const FRECHET_EPS: f64 = 1e-6;

/// `|μ1 − μ2|² + tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^{1/2})`, clamped at zero.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    s1.check()?;
    s2.check()?;
    if s1.mean.len() != s2.mean.len() {
        return Err(Error::InvalidStats(format!("dimension {} vs {}", s1.mean.len(), s2.mean.len())));
    }
    let diff = (&s1.mean - &s2.mean).norm_squared();
    let (c1, c2) = (&s1.cov, &s2.cov);
    let cross = match trace_sqrt_product(c1, c2) {
        Some(t) => t,
        None => {
            let eye = DMatrix::<f64>::identity(c1.nrows(), c1.ncols()) * FRECHET_EPS;
            trace_sqrt_product(&(c1 + &eye), &(c2 + &eye))
                .ok_or_else(|| Error::InvalidStats("covariance product is not positive semidefinite".into()))?
        }
    };
    let d = diff + c1.trace() + c2.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::InvalidStats("non-finite distance".into()));
    }
    Ok(d.max(0.0))
}

/// Feature maps of a batch as host arrays `[B, C, H*W]`.
fn feature_values(
    images: &[&GlyphImage],
    extractor: &dyn FeatureExtractor<f32>,
) -> Result<Vec<(usize, usize, Vec<f32>)>> {
    let ps = ParamStore::<f32>::new();
    let mut g = Graph::new(&ps);
    let x = g.input(image_batch(images));
    let maps = extractor.feature_maps(&mut g, x)?;
    Ok(maps
        .into_iter()
        .map(|m| {
            let v = g.value(m);
            let shape = v.shape();
            let channels = if shape.len() >= 2 { shape[1] } else { 1 };
            let per_item = v.len() / shape[0];
            (channels, per_item / channels, v.data().to_vec())
        })
        .collect())
}

/// Per-pair perceptual distances: for each layer, features are scaled to unit
/// length across channels at every position, then the mean squared difference
/// is taken; layers are summed.
pub fn perceptual_distances(
    a: &[GlyphImage],
    b: &[GlyphImage],
    extractor: &dyn FeatureExtractor<f32>,
) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::InvalidConfig("perceptual distance needs equally many images".into()));
    }
    for (x, y) in a.iter().zip(b) {
        x.check_same_shape(y)?;
    }
    let mut out = Vec::with_capacity(a.len());
    for (ca, cb) in a.chunks(32).zip(b.chunks(32)) {
        let fa = feature_values(&ca.iter().collect::<Vec<_>>(), extractor)?;
        let fb = feature_values(&cb.iter().collect::<Vec<_>>(), extractor)?;
        for item in 0..ca.len() {
            let mut total = 0.0;
            for ((channels, positions, va), (_, _, vb)) in fa.iter().zip(&fb) {
                let base = item * channels * positions;
                let mut sum = 0.0;
                for p in 0..*positions {
                    let at = |v: &[f32], c: usize| v[base + c * positions + p] as f64;
                    let na = (0..*channels).map(|c| at(va, c).powi(2)).sum::<f64>().sqrt() + 1e-10;
                    let nb = (0..*channels).map(|c| at(vb, c).powi(2)).sum::<f64>().sqrt() + 1e-10;
                    sum += (0..*channels).map(|c| (at(va, c) / na - at(vb, c) / nb).powi(2)).sum::<f64>();
                }
                total += sum / (channels * positions) as f64;
            }
            out.push(total);
        }
    }
    Ok(out)
}

pub fn perceptual_distance(a: &GlyphImage, b: &GlyphImage, extractor: &dyn FeatureExtractor<f32>) -> Result<f64> {
    Ok(perceptual_distances(std::slice::from_ref(a), std::slice::from_ref(b), extractor)?[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub extractor_hash: String,
    pub n_pairs: usize,
    pub ssim_mean: f64,
    pub rmse_mean: f64,
    pub lpips_mean: f64,
    pub fid: f64,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(Error::io(path))
    }
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    Ok(std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
        .collect())
}

/// Compares same-named PNGs in two directories. Pairs are processed in sorted
/// name order, so the report does not depend on directory enumeration order.
/// A file named `grid.png` (a contact sheet) is skipped.
pub fn evaluate_set(
    gen_dir: &Path,
    ref_dir: &Path,
    extractor: &dyn FeatureExtractor<f32>,
    cfg: &SsimConfig,
) -> Result<EvalReport> {
    let mut gen = png_names(gen_dir)?;
    let mut refs = png_names(ref_dir)?;
    gen.remove("grid.png");
    refs.remove("grid.png");
    let unmatched: Vec<String> = gen.symmetric_difference(&refs).cloned().collect();
    if !unmatched.is_empty() {
        return Err(Error::MissingPair(unmatched));
    }
    if gen.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG files in {}", gen_dir.display())));
    }
    let mut a = Vec::with_capacity(gen.len());
    let mut b = Vec::with_capacity(gen.len());
    for name in &gen {
        let x = GlyphImage::load_png(&gen_dir.join(name))?;
        let y = GlyphImage::load_png(&ref_dir.join(name))?;
        x.check_same_shape(&y)?;
        a.push(x);
        b.push(y);
    }
    let n = a.len() as f64;
    let mut ssim_sum = 0.0;
    let mut rmse_sum = 0.0;
    for (x, y) in a.iter().zip(&b) {
        ssim_sum += ssim(x, y, cfg)?;
        rmse_sum += rmse(x, y)?;
    }
    let sa: Vec<GlyphImage> = a.iter().map(GlyphImage::to_signed).collect();
    let sb: Vec<GlyphImage> = b.iter().map(GlyphImage::to_signed).collect();
    let lpips_mean = perceptual_distances(&sa, &sb, extractor)?.iter().sum::<f64>() / n;
    let fid = frechet_distance(&feature_stats(&sa, extractor)?, &feature_stats(&sb, extractor)?)?;
    Ok(EvalReport {
        extractor_hash: extractor.identity_hash(),
        n_pairs: a.len(),
        ssim_mean: ssim_sum / n,
        rmse_mean: rmse_sum / n,
        lpips_mean,
        fid,
    })
}
