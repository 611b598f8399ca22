//! Loss functions, the optimization step, and the resumable training loop.
//!
//! The objective is `mse(eps_pred, eps) + lambda * perceptual(x0_hat, x0)`,
//! where `x0_hat` is the clean image implied by the predicted noise (clamped to
//! `[-1, 1]`) and the perceptual term compares frozen extractor features.

use std::fs::File;
use std::path::{Path, PathBuf};

use jamodiff_tensor::{AdamW, AdamWConfig, Array, Float, Graph, NodeId, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{CharAttributes, Conditioner};
use crate::container::TensorFile;
use crate::denoiser::{Dropout, UNet};
use crate::diffusion::{forward_marginal_with_noise, standard_normal_image};
use crate::error::{Error, Result};
use crate::extractor::{ConvExtractor, FeatureExtractor, IdentityExtractor};
use crate::image::GlyphImage;
use crate::model::{image_batch, Model, ModelConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub perceptual_weight: f64,
    pub schedule: ScheduleKind,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            iterations: 50_000,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            dropout: 0.1,
            perceptual_weight: 0.01,
            schedule: ScheduleKind::Cosine,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.perceptual_weight.is_nan() || self.perceptual_weight < 0.0 {
            return bad("perceptual_weight must be non-negative");
        }
        Ok(())
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec::standard(self.schedule, self.steps)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// One training example; both images are in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub attrs: CharAttributes,
    pub style_ref: GlyphImage,
    pub target: GlyphImage,
}

/// Supplies training batches, drawing any randomness from the trainer's stream.
pub trait BatchSource {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TrainItem>>;
}

/// A fixed list of items, sampled uniformly with replacement.
pub struct ItemPool(pub Vec<TrainItem>);

impl BatchSource for ItemPool {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TrainItem>> {
        if self.0.is_empty() {
            return Err(Error::EmptyDataset("no training items".into()));
        }
        Ok((0..batch_size).map(|_| self.0[rng.random_range(0..self.0.len())].clone()).collect())
    }
}

/// Diffusion step and noise drawn for every batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub steps: Vec<usize>,
    pub eps: Vec<GlyphImage>,
}

impl StepNoise {
    pub fn draw(batch_len: usize, side: usize, sched: &NoiseSchedule, rng: &mut impl Rng) -> Self {
        let steps: Vec<usize> = (0..batch_len).map(|_| rng.random_range(1..=sched.steps())).collect();
        let eps = (0..batch_len).map(|_| standard_normal_image(side, rng)).collect();
        Self { steps, eps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub mse: f64,
    pub perceptual: f64,
}

pub fn mse_loss(eps_pred: &GlyphImage, eps: &GlyphImage) -> Result<f64> {
    eps_pred.check_same_shape(eps)?;
    let n = eps.pixels().len() as f64;
    Ok(eps_pred.pixels().iter().zip(eps.pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Sum over extractor layers of the mean squared feature difference.
/// Only `pred` carries gradient; `target` features are constants.
pub fn perceptual_loss_graph<F: Float>(
    g: &mut Graph<'_, F>,
    pred: NodeId,
    target: NodeId,
    extractor: &dyn FeatureExtractor<F>,
) -> Result<NodeId> {
    let fp = extractor.feature_maps(g, pred)?;
    let ft = extractor.feature_maps(g, target)?;
    if fp.is_empty() || fp.len() != ft.len() {
        return Err(Error::InvalidConfig("extractor must expose at least one feature map".into()));
    }
    let mut total: Option<NodeId> = None;
    for (a, b) in fp.into_iter().zip(ft) {
        let d = g.sub(a, b);
        let l = g.mean_square(d);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    Ok(total.unwrap())
}

/// Perceptual loss between two single images in `[-1, 1]`.
pub fn perceptual_loss(
    x0_pred: &GlyphImage,
    x0_target: &GlyphImage,
    extractor: &dyn FeatureExtractor<f64>,
) -> Result<f64> {
    x0_pred.check_same_shape(x0_target)?;
    let ps = ParamStore::<f64>::new();
    let mut g = Graph::new(&ps);
    let p = g.input(image_batch(&[x0_pred]));
    let t = g.input(image_batch(&[x0_target]));
    let l = perceptual_loss_graph(&mut g, p, t, extractor)?;
    Ok(g.value(l).item())
}

pub struct LossNodes {
    pub total: NodeId,
    pub mse: NodeId,
    pub perceptual: Option<NodeId>,
}

/// Records the full objective for one batch on `g`.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<F: Float>(
    g: &mut Graph<'_, F>,
    cond: &Conditioner,
    unet: &UNet,
    batch: &[TrainItem],
    noise: &StepNoise,
    sched: &NoiseSchedule,
    extractor: &dyn FeatureExtractor<F>,
    perceptual_weight: f64,
    dropout: Option<Dropout<'_>>,
) -> Result<LossNodes> {
    if batch.is_empty() || noise.steps.len() != batch.len() || noise.eps.len() != batch.len() {
        return Err(Error::InvalidConfig("noise draws must match the batch".into()));
    }
    let mut x_t = Vec::with_capacity(batch.len());
    for ((item, &t), eps) in batch.iter().zip(&noise.steps).zip(&noise.eps) {
        x_t.push(forward_marginal_with_noise(&item.target, eps, t, sched)?);
    }
    let attrs: Vec<CharAttributes> = batch.iter().map(|i| i.attrs.clone()).collect();
    let refs = g.input(image_batch(&batch.iter().map(|i| &i.style_ref).collect::<Vec<_>>()));
    let bundle = cond.encode(g, &attrs, refs)?;
    let z = cond.fuse(g, bundle)?;
    let xt_node = g.input(image_batch(&x_t.iter().collect::<Vec<_>>()));
    let eps_pred = unet.forward(g, xt_node, &noise.steps, z, dropout)?;
    let eps_node = g.input(image_batch(&noise.eps.iter().collect::<Vec<_>>()));
    let diff = g.sub(eps_pred, eps_node);
    let mse = g.mean_square(diff);
    if perceptual_weight == 0.0 {
        return Ok(LossNodes { total: mse, mse, perceptual: None });
    }
    // x0_hat = x_t / sqrt(ab_t) - sqrt(1 - ab_t) / sqrt(ab_t) * eps_pred, per item.
    let inv: Vec<f64> = noise.steps.iter().map(|&t| 1.0 / sched.alpha_bars()[t].sqrt()).collect();
    let noise_coef =
        noise.steps.iter().zip(&inv).map(|(&t, i)| F::lit(-sched.one_minus_alpha_bars()[t].sqrt() * i)).collect();
    let scaled_eps = g.scale_rows(eps_pred, noise_coef);
    let scaled_xt = g.scale_rows(xt_node, inv.iter().map(|&i| F::lit(i)).collect());
    let x0_hat = g.add(scaled_xt, scaled_eps);
    let x0_hat = g.clamp(x0_hat, -F::one(), F::one());
    let target = g.input(image_batch(&batch.iter().map(|i| &i.target).collect::<Vec<_>>()));
    let perc = perceptual_loss_graph(g, x0_hat, target, extractor)?;
    let weighted = g.scale(perc, F::lit(perceptual_weight));
    let total = g.add(mse, weighted);
    Ok(LossNodes { total, mse, perceptual: Some(perc) })
}

/// Extractor used by the perceptual term, stored inside checkpoints.
#[derive(Clone, Debug)]
pub enum PerceptualExtractor {
    Identity,
    Conv(ConvExtractor),
}

impl<F: Float> FeatureExtractor<F> for PerceptualExtractor {
    fn feature_maps(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<Vec<NodeId>> {
        match self {
            Self::Identity => IdentityExtractor.feature_maps(g, x),
            Self::Conv(c) => c.feature_maps(g, x),
        }
    }

    fn identity_hash(&self) -> String {
        match self {
            Self::Identity => FeatureExtractor::<F>::identity_hash(&IdentityExtractor),
            Self::Conv(c) => FeatureExtractor::<F>::identity_hash(c),
        }
    }
}

/// One optimization step. Randomness (steps, noise, dropout) comes from `rng` in a fixed order.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    model: &mut Model,
    opt: &mut AdamW<f32>,
    batch: &[TrainItem],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    extractor: &dyn FeatureExtractor<f32>,
    rng: &mut ChaCha8Rng,
    iteration: u64,
) -> Result<StepLosses> {
    for item in batch {
        model.check_image(&item.target)?;
        model.check_image(&item.style_ref)?;
    }
    let noise = StepNoise::draw(batch.len(), model.config.image_size(), sched, rng);
    let (losses, grads) = {
        let mut g = Graph::new(&model.params);
        let dropout = Some(Dropout { p: cfg.dropout, rng: &mut *rng });
        let nodes = loss_graph(
            &mut g,
            &model.cond,
            &model.unet,
            batch,
            &noise,
            sched,
            extractor,
            cfg.perceptual_weight,
            dropout,
        )?;
        let mse = g.value(nodes.mse).item() as f64;
        let perceptual = nodes.perceptual.map_or(0.0, |p| g.value(p).item() as f64);
        let losses = StepLosses { total: mse + cfg.perceptual_weight * perceptual, mse, perceptual };
        if !(losses.total.is_finite() && mse.is_finite() && perceptual.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration, total: losses.total, mse, perceptual });
        }
        (losses, g.backward(nodes.total).into_param_grads())
    };
    opt.step(&mut model.params, &grads);
    Ok(losses)
}

/// Objective averaged over `draws` seeded (t, noise) pairs per item, without
/// dropout and without updating anything. Two models compared with the same
/// items and seed see identical noise.
pub fn evaluation_loss(
    model: &Model,
    items: &[TrainItem],
    sched: &NoiseSchedule,
    extractor: &dyn FeatureExtractor<f32>,
    perceptual_weight: f64,
    draws: usize,
    seed: u64,
) -> Result<StepLosses> {
    if items.is_empty() || draws == 0 {
        return Err(Error::EmptyDataset("evaluation needs items and draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expanded: Vec<TrainItem> = items.iter().flat_map(|i| std::iter::repeat_n(i, draws)).cloned().collect();
    let (mut mse, mut perceptual) = (0.0, 0.0);
    for chunk in expanded.chunks(32) {
        let noise = StepNoise::draw(chunk.len(), model.config.image_size(), sched, &mut rng);
        let mut g = Graph::new(&model.params);
        let nodes =
            loss_graph(&mut g, &model.cond, &model.unet, chunk, &noise, sched, extractor, perceptual_weight, None)?;
        let w = chunk.len() as f64;
        mse += w * g.value(nodes.mse).item() as f64;
        perceptual += w * nodes.perceptual.map_or(0.0, |p| g.value(p).item() as f64);
    }
    let n = expanded.len() as f64;
    let (mse, perceptual) = (mse / n, perceptual / n);
    Ok(StepLosses { total: mse + perceptual_weight * perceptual, mse, perceptual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format("malformed random state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// JSON header of a checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    pub iteration: u64,
    pub optimizer_step: u64,
    /// Widths of the embedded convolutional extractor; `None` for the identity extractor.
    pub extractor_widths: Option<Vec<usize>>,
    pub extractor_hash: String,
    rng: RngState,
}

/// Model, optimizer, schedule, and random stream of a training run.
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW<f32>,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub extractor: PerceptualExtractor,
    pub iteration: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh run. Parameters are initialized from `config.seed`; the data and
    /// noise stream uses the same seed on a separate ChaCha stream.
    pub fn new(model_config: ModelConfig, config: TrainConfig, extractor: PerceptualExtractor) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let opt = AdamW::new(config.optimizer(), &model.params);
        let schedule = config.schedule_spec().build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self { model, opt, config, schedule, extractor, iteration: 0, rng })
    }

    pub fn step(&mut self, source: &mut dyn BatchSource) -> Result<StepLosses> {
        let batch = source.next_batch(self.config.batch_size, &mut self.rng)?;
        let losses = training_step(
            &mut self.model,
            &mut self.opt,
            &batch,
            &self.schedule,
            &self.config,
            &self.extractor,
            &mut self.rng,
            self.iteration + 1,
        )?;
        self.iteration += 1;
        Ok(losses)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config.clone(),
            train: self.config.clone(),
            schedule: self.schedule.spec().clone(),
            iteration: self.iteration,
            optimizer_step: self.opt.step_count(),
            extractor_widths: match &self.extractor {
                PerceptualExtractor::Identity => None,
                PerceptualExtractor::Conv(c) => Some(c.widths().to_vec()),
            },
            extractor_hash: FeatureExtractor::<f32>::identity_hash(&self.extractor),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn to_file(&self) -> Result<TensorFile> {
        let mut tensors = Vec::new();
        for (id, name, value) in self.model.params.iter() {
            tensors.push((format!("param/{name}"), value.clone()));
            let shape = value.shape().to_vec();
            tensors.push((
                format!("adam.m/{name}"),
                Array::new(shape.clone(), self.opt.first_moments()[id.index()].clone()),
            ));
            tensors.push((format!("adam.v/{name}"), Array::new(shape, self.opt.second_moments()[id.index()].clone())));
        }
        if let PerceptualExtractor::Conv(c) = &self.extractor {
            for (name, value) in c.to_file().tensors {
                tensors.push((format!("extractor/{name}"), value));
            }
        }
        Ok(TensorFile { kind: CHECKPOINT_KIND.into(), meta: serde_json::to_value(self.meta())?, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file()?.write(path)
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())?;
        let mut model = Model::new(meta.model.clone(), 0)?;
        load_params(&mut model.params, file, "param/")?;
        let mut m = Vec::with_capacity(model.params.len());
        let mut v = Vec::with_capacity(model.params.len());
        for (_, name, value) in model.params.iter() {
            for (prefix, dst) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
                let key = format!("{prefix}{name}");
                let t = file.tensor(&key).ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
                if t.shape() != value.shape() {
                    return Err(Error::Format(format!("tensor {key} has the wrong shape")));
                }
                dst.push(t.data().to_vec());
            }
        }
        let opt = AdamW::from_state(meta.train.optimizer(), meta.optimizer_step, m, v);
        let extractor = match &meta.extractor_widths {
            None => PerceptualExtractor::Identity,
            Some(widths) => {
                let inner = TensorFile {
                    kind: crate::extractor::EXTRACTOR_KIND.into(),
                    meta: serde_json::json!({ "widths": widths }),
                    tensors: file
                        .tensors
                        .iter()
                        .filter_map(|(n, a)| n.strip_prefix("extractor/").map(|n| (n.to_string(), a.clone())))
                        .collect(),
                };
                PerceptualExtractor::Conv(ConvExtractor::from_file(&inner)?)
            }
        };
        if FeatureExtractor::<f32>::identity_hash(&extractor) != meta.extractor_hash {
            return Err(Error::Format("embedded extractor does not match its recorded hash".into()));
        }
        let schedule = meta.schedule.build()?;
        Ok(Self {
            model,
            opt,
            config: meta.train.clone(),
            schedule,
            extractor,
            iteration: meta.iteration,
            rng: meta.rng.restore()?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&TensorFile::read(path, CHECKPOINT_KIND)?)
    }
}

fn load_params(params: &mut ParamStore<f32>, file: &TensorFile, prefix: &str) -> Result<()> {
    let ids: Vec<_> = params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        let key = format!("{prefix}{name}");
        let t = file.tensor(&key).ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
        if t.shape() != params.get(id).shape() {
            return Err(Error::Format(format!(
                "tensor {key} has shape {:?}, expected {:?}",
                t.shape(),
                params.get(id).shape()
            )));
        }
        *params.get_mut(id) = t.clone();
    }
    Ok(())
}

/// Loads only what sampling needs: the model and its schedule.
pub fn load_model(path: &Path) -> Result<(Model, NoiseSchedule, CheckpointMeta)> {
    let file = TensorFile::read(path, CHECKPOINT_KIND)?;
    let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())?;
    let mut model = Model::new(meta.model.clone(), 0)?;
    load_params(&mut model.params, &file, "param/")?;
    let schedule = meta.schedule.build()?;
    Ok((model, schedule, meta))
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_perc: f64,
}

/// The loss log lives next to the checkpoint: `model.ckpt` logs to `model.loss.csv`.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let file = File::open(path).map_err(Error::io(path))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = csv::Writer::from_writer(file);
    // Write the header even when there are no records yet.
    if records.is_empty() {
        w.write_record(["iteration", "loss_total", "loss_mse", "loss_perc"]).map_err(csv_err)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(path))
}

/// Runs `trainer` until it reaches `config.iterations`, checkpointing to `out`
/// and appending to the loss log. A resumed trainer keeps its earlier log rows
/// up to its own iteration and drops any later ones.
pub fn train(trainer: &mut Trainer, source: &mut dyn BatchSource, out: &Path) -> Result<Vec<LossRecord>> {
    let log_path = loss_log_path(out);
    let mut records = if trainer.iteration > 0 && log_path.exists() {
        let mut r = read_loss_log(&log_path)?;
        r.retain(|rec| rec.iteration <= trainer.iteration);
        r
    } else {
        Vec::new()
    };
    let target = trainer.config.iterations;
    let every = trainer.config.checkpoint_every;
    while trainer.iteration < target {
        let l = trainer.step(source)?;
        records.push(LossRecord {
            iteration: trainer.iteration,
            loss_total: l.total,
            loss_mse: l.mse,
            loss_perc: l.perceptual,
        });
        if trainer.iteration.is_multiple_of(50) || trainer.iteration == target {
            tracing::info!(
                iteration = trainer.iteration,
                loss = l.total,
                mse = l.mse,
                perceptual = l.perceptual,
                "train"
            );
        }
        if every > 0 && trainer.iteration.is_multiple_of(every) && trainer.iteration < target {
            trainer.save(out)?;
            write_loss_log(&log_path, &records)?;
        }
    }
    trainer.save(out)?;
    write_loss_log(&log_path, &records)?;
    Ok(records)
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
