use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jamodiff::dataset::{
    build_dataset, char_attributes, extractor_training_set, Charset, DatasetConfig, DatasetManifest, GlyphLoader,
    Split, MANIFEST_FILE,
};
use jamodiff::diffusion::sample_batch;
use jamodiff::extractor::{ConvExtractor, ExtractorTrainConfig, IdentityExtractor, DEFAULT_WIDTHS};
use jamodiff::hangul::{is_syllable, StrokeTable};
use jamodiff::image::{save_contact_sheet, GlyphImage};
use jamodiff::metrics::{evaluate_set, SsimConfig};
use jamodiff::schedule::ScheduleKind;
use jamodiff::training::{load_model, train, PerceptualExtractor, Trainer};
use jamodiff::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::{info, warn};

mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "jamodiff", version, about = "One-shot Hangul glyph generation with a conditional diffusion model")]
struct Cli {
    /// Log level for diagnostics on stderr.
    #[arg(long, global = true, default_value = "info")]
    log_level: tracing::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render font files into a glyph dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Pretrain the convolutional feature extractor.
    Extractor {
        #[command(subcommand)]
        action: ExtractorAction,
    },
    /// Train the conditioning stack and denoiser.
    Train(TrainArgs),
    /// Generate glyphs in the style of one reference image.
    Sample(SampleArgs),
    /// Compare generated glyphs against references.
    Eval(EvalArgs),
}

#[derive(Subcommand)]
enum DatasetAction {
    Build(DatasetArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Directory of .ttf/.otf files; `handwritten/` and `printed/` subdirectories set the category.
    #[arg(long)]
    fonts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "ksx1001")]
    charset: String,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File naming one test font id per line.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    test_fonts: usize,
    /// Render only the first N charset characters.
    #[arg(long)]
    max_chars: Option<usize>,
}

#[derive(Subcommand)]
enum ExtractorAction {
    Train(ExtractorArgs),
}

#[derive(Args)]
struct ExtractorArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    iterations: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Upper bound on the number of training images loaded.
    #[arg(long, default_value_t = 4096)]
    max_images: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Linear,
    Cosine,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path; the loss log is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// TOML or JSON file with `train` and `model` tables; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frozen extractor for the perceptual loss; pretrained on the manifest if omitted.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Continue from the checkpoint at `--out`. Only `--iterations` may change.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of diffusion steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    perceptual_weight: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

impl TrainArgs {
    fn has_overrides(&self) -> bool {
        self.config.is_some()
            || self.extractor.is_some()
            || self.batch_size.is_some()
            || self.lr.is_some()
            || self.seed.is_some()
            || self.steps.is_some()
            || self.schedule.is_some()
            || self.dropout.is_some()
            || self.perceptual_weight.is_some()
            || self.weight_decay.is_some()
            || self.checkpoint_every.is_some()
    }

    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { t.$field = v; })* };
        }
        set!(iterations, batch_size, lr, seed, steps, dropout, perceptual_weight, weight_decay, checkpoint_every);
        if let Some(s) = self.schedule {
            t.schedule = match s {
                Schedule::Linear => ScheduleKind::Linear,
                Schedule::Cosine => ScheduleKind::Cosine,
            };
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// The single style reference glyph (PNG, same size as the model).
    #[arg(long)]
    style: PathBuf,
    /// Hangul syllables to generate.
    #[arg(long)]
    chars: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gen: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Extractor for the feature metrics; the identity extractor if omitted.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Report path (default: `report.json` inside the generated directory).
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Exit status for failures: 3 for numerical breakdowns, 2 for everything else.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFiniteLoss { .. } | Error::DegenerateStep(_) | Error::InvalidStats(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(cli.log_level).with_target(false).init();
    let result = match cli.command {
        Command::Dataset { action: DatasetAction::Build(a) } => cmd_dataset(a),
        Command::Extractor { action: ExtractorAction::Train(a) } => cmd_extractor(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_dataset(a: DatasetArgs) -> jamodiff::Result<()> {
    let cfg = DatasetConfig {
        size: a.size,
        seed: a.seed,
        test_fonts_per_category: a.test_fonts,
        split_file: a.split,
        max_chars: a.max_chars,
    };
    info!("dataset config: {}", serde_json::to_string(&cfg)?);
    let charset = Charset::by_name(&a.charset)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let manifest = build_dataset(&a.fonts, &charset, &a.out, &cfg)?;
    let test = manifest.split(Split::Test).count();
    info!(records = manifest.records.len(), train = manifest.records.len() - test, test, "dataset written");
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn cmd_extractor(a: ExtractorArgs) -> jamodiff::Result<()> {
    let cfg = ExtractorTrainConfig { iterations: a.iterations, batch_size: a.batch_size, lr: a.lr, seed: a.seed };
    info!("extractor config: {}", serde_json::to_string(&cfg)?);
    let manifest = DatasetManifest::read(&a.manifest)?;
    let (images, labels) = extractor_training_set(&manifest, a.max_images, a.seed)?;
    let (extractor, history) = ConvExtractor::pretrain(&images, &labels, &DEFAULT_WIDTHS, &cfg)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        info!(first, last, "extractor cross-entropy");
    }
    extractor.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn image_side(manifest: &DatasetManifest) -> jamodiff::Result<usize> {
    let first = manifest
        .split(Split::Train)
        .next()
        .ok_or_else(|| Error::EmptyDataset("the manifest has no training records".into()))?;
    Ok(manifest.load_image(first)?.side())
}

fn cmd_train(a: TrainArgs) -> jamodiff::Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let side = image_side(&manifest)?;
    let mut trainer = if a.resume {
        if a.has_overrides() {
            return Err(Error::InvalidConfig("--resume only accepts --iterations".into()));
        }
        let mut trainer = Trainer::load(&a.out)?;
        if let Some(n) = a.iterations {
            trainer.config.iterations = n;
        }
        info!(iteration = trainer.iteration, "resuming");
        trainer
    } else {
        let (mut cfg, explicit_size) = match &a.config {
            Some(path) => RunConfig::load(path)?,
            None => (RunConfig::default(), false),
        };
        a.apply(&mut cfg);
        if explicit_size && cfg.model.denoiser.image_size != side {
            return Err(Error::BadImageShape {
                expected: format!("{0}x{0} from the config", cfg.model.denoiser.image_size),
                got: format!("{side}x{side} in the dataset"),
            });
        }
        cfg.model.denoiser.image_size = side;
        cfg.train.validate()?;
        cfg.model.validate()?;
        let extractor = match &a.extractor {
            Some(path) => PerceptualExtractor::Conv(ConvExtractor::load(path)?),
            None if cfg.train.perceptual_weight == 0.0 => PerceptualExtractor::Identity,
            None => {
                info!("pretraining the perceptual extractor on the training split");
                let (images, labels) = extractor_training_set(&manifest, 4096, cfg.train.seed)?;
                let ecfg = ExtractorTrainConfig { seed: cfg.train.seed, ..Default::default() };
                PerceptualExtractor::Conv(ConvExtractor::pretrain(&images, &labels, &DEFAULT_WIDTHS, &ecfg)?.0)
            }
        };
        Trainer::new(cfg.model, cfg.train, extractor)?
    };
    let resolved = RunConfig { train: trainer.config.clone(), model: trainer.model.config.clone() };
    info!("resolved config: {}", serde_json::to_string(&resolved)?);
    let mut loader = GlyphLoader::new(manifest, Charset::ksx1001(), side)?;
    let records = train(&mut trainer, &mut loader, &a.out)?;
    if let Some(last) = records.last() {
        info!(iteration = last.iteration, loss = last.loss_total, "training finished");
    }
    println!("{}", a.out.display());
    Ok(())
}

/// Unique characters in input order, or the offending non-syllables.
fn parse_chars(text: &str) -> jamodiff::Result<Vec<char>> {
    let bad: Vec<String> =
        text.chars().filter(|c| !is_syllable(*c)).map(|c| format!("{c:?} (U+{:04X})", c as u32)).collect();
    if !bad.is_empty() {
        return Err(Error::InvalidConfig(format!("not Hangul syllables: {}", bad.join(", "))));
    }
    let mut seen = std::collections::HashSet::new();
    Ok(text.chars().filter(|c| seen.insert(*c)).collect())
}

fn cmd_sample(a: SampleArgs) -> jamodiff::Result<()> {
    let chars = parse_chars(&a.chars)?;
    if chars.is_empty() {
        return Err(Error::InvalidConfig("no characters to sample".into()));
    }
    let (model, schedule, _) = load_model(&a.checkpoint)?;
    let style = GlyphImage::load_png(&a.style)?.to_signed();
    model.check_image(&style)?;
    let charset = Charset::ksx1001();
    let strokes = StrokeTable::bundled();
    let attrs = chars.iter().map(|&c| char_attributes(c, &charset, &strokes)).collect::<jamodiff::Result<Vec<_>>>()?;
    for (c, at) in chars.iter().zip(&attrs) {
        if at.char_index.is_none() {
            warn!("{c} is outside the training charset; it gets no content code");
        }
    }
    let z = model.latents(&attrs, &vec![style; chars.len()])?;
    // One stream per character position keeps each chain independent of the others.
    let mut rngs: Vec<ChaCha8Rng> = (0..chars.len())
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(a.seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let images = sample_batch(&model, &z, &schedule, model.config.image_size(), &mut rngs)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let unit: Vec<GlyphImage> = images.iter().map(GlyphImage::to_unit).collect();
    for (c, img) in chars.iter().zip(&unit) {
        let path = a.out.join(format!("{:04x}.png", *c as u32));
        img.save_png(&path)?;
        println!("{}", path.display());
    }
    save_contact_sheet(&unit, unit.len().min(10), &a.out.join("grid.png"))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> jamodiff::Result<()> {
    let report = match &a.extractor {
        Some(path) => evaluate_set(&a.gen, &a.reference, &ConvExtractor::load(path)?, &SsimConfig::default())?,
        None => evaluate_set(&a.gen, &a.reference, &IdentityExtractor, &SsimConfig::default())?,
    };
    let path = a.report.unwrap_or_else(|| a.gen.join("report.json"));
    report.write(&path)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    info!("report written to {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_failures_exit_3() {
        let nf = Error::NonFiniteLoss { iteration: 4, total: f64::NAN, mse: f64::NAN, perceptual: 0.0 };
        assert_eq!(exit_code(&nf), 3);
        assert_eq!(exit_code(&Error::DegenerateStep(1000)), 3);
        assert_eq!(exit_code(&Error::MissingPair(vec!["a.png".into()])), 2);
        assert_eq!(exit_code(&Error::EmptyDataset("x".into())), 2);
    }

    #[test]
    fn char_parsing() {
        assert_eq!(parse_chars("한글한").unwrap(), vec!['한', '글']);
        let err = parse_chars("가 b").unwrap_err().to_string();
        assert!(err.contains("U+0020") && err.contains("U+0062"), "{err}");
    }
}
