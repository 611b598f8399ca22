//! Oracles and fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use jamodiff::conditioning::ConditioningConfig;
use jamodiff::dataset::{build_dataset, char_attributes, Charset, DatasetConfig, DatasetManifest, GlyphLoader};
use jamodiff::denoiser::DenoiserConfig;
use jamodiff::diffusion::sample_batch;
use jamodiff::extractor::{ConvExtractor, ExtractorTrainConfig, DEFAULT_WIDTHS};
use jamodiff::hangul::{decompose, StrokeTable, SYLLABLE_COUNT, SYLLABLE_FIRST};
use jamodiff::image::GlyphImage;
use jamodiff::metrics::{perceptual_distance, rmse, ssim, SsimConfig};
use jamodiff::model::{Model, ModelConfig};
use jamodiff::schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
use jamodiff::training::{
    evaluation_loss, loss_graph, smoothed, train, PerceptualExtractor, StepLosses, StepNoise, TrainConfig, TrainItem,
    Trainer,
};
use jamodiff_tensor::{Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unicode_normalization::UnicodeNormalization;

pub fn fonts_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/fonts")
}

/// First violated schedule invariant, checked against an independently accumulated product.
pub fn schedule_violation(s: &NoiseSchedule) -> Option<String> {
    let (b, ab) = (s.betas(), s.alpha_bars());
    if b.len() != s.steps() || ab.len() != s.steps() + 1 {
        return Some("wrong lengths".into());
    }
    if ab[0] != 1.0 {
        return Some(format!("alpha_bars[0] = {}", ab[0]));
    }
    let mut product = 1.0;
    for t in 1..=s.steps() {
        let beta = b[t - 1];
        if !(beta > 0.0 && beta < 1.0) {
            return Some(format!("beta_{t} = {beta}"));
        }
        if ab[t] >= ab[t - 1] {
            return Some(format!("alpha_bars not decreasing at {t}"));
        }
        if (ab[t] - ab[t - 1] * (1.0 - beta)).abs() > 1e-12 {
            return Some(format!("recurrence broken at {t}"));
        }
        product *= 1.0 - beta;
        if (ab[t] - product).abs() > 1e-12 {
            return Some(format!("alpha_bars[{t}] differs from the running product"));
        }
    }
    None
}

/// Mean and variance of x_{t-1} given (x_t, x_0) from the joint Gaussian of
/// (x_{t-1}, x_t), built directly from the per-step betas.
pub fn bivariate_posterior(betas: &[f64], t: usize, x0: f64, xt: f64) -> (f64, f64) {
    let ab_prev: f64 = betas[..t - 1].iter().map(|b| 1.0 - b).product();
    let beta = betas[t - 1];
    let a = (1.0 - beta).sqrt();
    let (m1, v1) = (ab_prev.sqrt() * x0, 1.0 - ab_prev);
    let (m2, v2) = (a * m1, a * a * v1 + beta);
    let cov = a * v1;
    (m1 + cov / v2 * (xt - m2), v1 - cov * cov / v2)
}

pub fn linear_betas(steps: usize, start: f64, end: f64) -> Vec<f64> {
    if steps == 1 {
        return vec![start];
    }
    (0..steps).map(|i| start + (end - start) * i as f64 / (steps - 1) as f64).collect()
}

/// First syllable whose decomposition disagrees with canonical (NFD) decomposition.
pub fn nfd_mismatch() -> Option<char> {
    (0..SYLLABLE_COUNT).map(|i| char::from_u32(SYLLABLE_FIRST + i).unwrap()).find(|&c| {
        let parts: Vec<u32> = c.nfd().map(|j| j as u32).collect();
        let Ok(t) = decompose(c) else { return true };
        let jong = if parts.len() == 3 { parts[2] - 0x11A7 } else { 0 };
        parts.len() < 2
            || parts[0] - 0x1100 != t.choseong as u32
            || parts[1] - 0x1161 != t.jungseong as u32
            || jong != t.jongseong as u32
    })
}

/// 16x16, two-level denoiser with a full but narrow conditioning stack.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        conditioning: ConditioningConfig {
            content_dim: 6,
            style_dim: 6,
            stroke_dim: 4,
            text_dim: 6,
            z_dim: 8,
            style_widths: vec![4, 4],
            ..Default::default()
        },
        denoiser: DenoiserConfig {
            image_size: 16,
            base_channels: 8,
            channel_mults: vec![1, 2],
            time_embed_dim: 8,
            z_dim: 8,
        },
    }
}

pub fn random_image(side: usize, rng: &mut impl Rng) -> GlyphImage {
    GlyphImage::new(side, (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn items_for(chars: &str, side: usize, rng: &mut impl Rng) -> Vec<TrainItem> {
    let (cs, st) = (Charset::ksx1001(), StrokeTable::bundled());
    chars
        .chars()
        .map(|c| TrainItem {
            attrs: char_attributes(c, &cs, &st).unwrap(),
            style_ref: random_image(side, rng),
            target: random_image(side, rng),
        })
        .collect()
}

pub struct GradReport {
    pub checked: usize,
    pub tensors: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

/// Central finite differences of the total loss (MSE plus perceptual) in f64,
/// checked at the largest-gradient entry and one random entry of every tensor.
pub fn gradcheck_total_loss(seed: u64, tolerance: f64) -> GradReport {
    let model = Model::new(toy_model_config(), seed).unwrap();
    let mut ps: ParamStore<f64> = model.params.cast();
    let sched = ScheduleSpec::standard(ScheduleKind::Linear, 50).build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let batch = items_for("가한", 16, &mut rng);
    let noise = StepNoise { steps: vec![3, 17], eps: vec![random_image(16, &mut rng), random_image(16, &mut rng)] };
    let extractor = PerceptualExtractor::Conv(ConvExtractor::random(&[4, 8], seed + 2));
    let lambda = 0.5;
    let loss = |ps: &ParamStore<f64>| {
        let mut g = Graph::new(ps);
        let n = loss_graph(&mut g, &model.cond, &model.unet, &batch, &noise, &sched, &extractor, lambda, None).unwrap();
        g.value(n.total).item()
    };
    let grads = {
        let mut g = Graph::new(&ps);
        let n = loss_graph(&mut g, &model.cond, &model.unet, &batch, &noise, &sched, &extractor, lambda, None).unwrap();
        g.backward(n.total).into_param_grads()
    };
    let h = 1e-5;
    let mut report = GradReport { checked: 0, tensors: 0, worst_rel: 0.0, failures: Vec::new() };
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let Some(grad) = &grads[id.index()] else { continue };
        report.tensors += 1;
        let argmax = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap();
        for k in [argmax, rng.random_range(0..grad.len())] {
            let orig = ps.get(id).data()[k];
            ps.get_mut(id).data_mut()[k] = orig + h;
            let up = loss(&ps);
            ps.get_mut(id).data_mut()[k] = orig - h;
            let down = loss(&ps);
            ps.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad[k];
            // Entries below the floor are indistinguishable from difference roundoff (about 1e-11 here).
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / scale;
            report.checked += 1;
            report.worst_rel = report.worst_rel.max(rel);
            if rel > tolerance {
                report.failures.push(format!("{}[{k}]: analytic {analytic:e} numeric {numeric:e}", ps.name(id)));
            }
        }
    }
    report
}

/// One bundled font, the first 10 charset syllables, 32x32.
pub struct OverfitFixture {
    pub dir: tempfile::TempDir,
    pub manifest: DatasetManifest,
    /// Target glyph per character with the next character's glyph as style reference.
    pub items: Vec<TrainItem>,
    pub extractor: ConvExtractor,
}

pub fn overfit_fixture() -> OverfitFixture {
    let dir = tempfile::tempdir().unwrap();
    let fonts = dir.path().join("fonts");
    std::fs::create_dir_all(&fonts).unwrap();
    std::fs::copy(fonts_dir().join("NanumGothicExtraBold.ttf"), fonts.join("bold.ttf")).unwrap();
    let cfg = DatasetConfig { size: 32, max_chars: Some(10), test_fonts_per_category: 0, ..Default::default() };
    let manifest = build_dataset(&fonts, &Charset::ksx1001(), &dir.path().join("data"), &cfg).unwrap();
    let images: Vec<GlyphImage> =
        manifest.records.iter().map(|r| manifest.load_image(r).unwrap().to_signed()).collect();
    let (cs, st) = (Charset::ksx1001(), StrokeTable::bundled());
    let n = images.len();
    let items = (0..n)
        .map(|i| TrainItem {
            attrs: char_attributes(manifest.records[i].character().unwrap(), &cs, &st).unwrap(),
            style_ref: images[(i + 1) % n].clone(),
            target: images[i].clone(),
        })
        .collect();
    // A single font leaves character identity as the classification task.
    let labels: Vec<usize> = (0..n).collect();
    let (extractor, _) =
        ConvExtractor::pretrain(&images, &labels, &DEFAULT_WIDTHS, &ExtractorTrainConfig::default()).unwrap();
    OverfitFixture { dir, manifest, items, extractor }
}

/// Fixture model: the reference layout at base width 16 so a 2,000-iteration run fits the time budget.
pub fn overfit_model_config(zero_text: bool) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.denoiser.image_size = 32;
    cfg.denoiser.base_channels = 16;
    cfg.conditioning.zero_text = zero_text;
    cfg
}

pub struct OverfitRun {
    pub trainer: Trainer,
    pub losses: Vec<f64>,
    pub train_secs: f64,
    /// Mean of the first and last 100 training losses.
    pub smoothed_first: f64,
    pub smoothed_last: f64,
    /// Deterministic objective on the 10 fixture items (dropout off, fixed draws).
    pub eval: StepLosses,
}

pub fn overfit_train(fx: &OverfitFixture, zero_text: bool, iterations: u64, seed: u64) -> OverfitRun {
    let tc = TrainConfig { iterations, seed, checkpoint_every: 0, ..Default::default() };
    let mut trainer =
        Trainer::new(overfit_model_config(zero_text), tc, PerceptualExtractor::Conv(fx.extractor.clone())).unwrap();
    let mut loader = GlyphLoader::new(fx.manifest.clone(), Charset::ksx1001(), 32).unwrap();
    let start = Instant::now();
    let name = if zero_text { "zero_text.ckpt" } else { "full.ckpt" };
    let records = train(&mut trainer, &mut loader, &fx.dir.path().join(name)).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let losses: Vec<f64> = records.iter().map(|r| r.loss_total).collect();
    let window = 100.min(losses.len());
    let sm = smoothed(&losses, window);
    let eval = evaluation_loss(
        &trainer.model,
        &fx.items,
        &trainer.schedule,
        &trainer.extractor,
        trainer.config.perceptual_weight,
        64,
        99,
    )
    .unwrap();
    OverfitRun { trainer, smoothed_first: sm[window - 1], smoothed_last: *sm.last().unwrap(), losses, train_secs, eval }
}

pub struct SampleQuality {
    pub samples: Vec<GlyphImage>,
    pub rmse: Vec<f64>,
    pub ssim: Vec<f64>,
    /// Fraction of samples perceptually closer to their own target than to the next character's target.
    pub closer_fraction: f64,
    pub secs: f64,
}

/// Samples every fixture character (one ChaCha stream per character) and scores it in `[0, 1]`.
pub fn sample_quality(fx: &OverfitFixture, model: &Model, sched: &NoiseSchedule, seed: u64) -> SampleQuality {
    let attrs: Vec<_> = fx.items.iter().map(|i| i.attrs.clone()).collect();
    let refs: Vec<_> = fx.items.iter().map(|i| i.style_ref.clone()).collect();
    let z = model.latents(&attrs, &refs).unwrap();
    let mut rngs: Vec<ChaCha8Rng> = (0..attrs.len())
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let start = Instant::now();
    let samples = sample_batch(model, &z, sched, 32, &mut rngs).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let cfg = SsimConfig::default();
    let n = samples.len();
    let (mut r, mut s, mut closer) = (Vec::new(), Vec::new(), 0);
    for (i, out) in samples.iter().enumerate() {
        let target = &fx.items[i].target;
        r.push(rmse(&out.to_unit(), &target.to_unit()).unwrap());
        s.push(ssim(&out.to_unit(), &target.to_unit(), &cfg).unwrap());
        let own = perceptual_distance(out, target, &fx.extractor).unwrap();
        let other = perceptual_distance(out, &fx.items[(i + 1) % n].target, &fx.extractor).unwrap();
        closer += usize::from(own < other);
    }
    SampleQuality { samples, rmse: r, ssim: s, closer_fraction: closer as f64 / n as f64, secs }
}
