//! Glyph rendering, dataset manifests, and training batch sampling.
//!
//! A dataset directory holds `manifest.jsonl` plus one 8-bit grayscale PNG
//! per glyph under `images/<font_id>/<hex codepoint>.png`. Stored images are
//! `[0, 1]` (white background 1.0, black ink 0.0); batches are `[-1, 1]`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ab_glyph::{point, Font, FontVec, PxScale};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::CharAttributes;
use crate::error::{Error, Result};
use crate::hangul::{decompose, jamo_token_ids, stroke_vector, JamoTriple, StrokeTable, StrokeVector};
use crate::image::GlyphImage;
use crate::training::{BatchSource, TrainItem};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const KSX1001: &str = include_str!("../data/ksx1001.txt");
/// Fraction of the image side left blank on each edge.
const MARGIN: f64 = 0.08;

/// An ordered set of characters; a character's position is its content-table row.
#[derive(Clone, Debug)]
pub struct Charset {
    name: String,
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Charset {
    /// The 2,350 KS X 1001 Hangul syllables.
    pub fn ksx1001() -> Self {
        Self::parse("ksx1001", KSX1001).expect("bundled charset is valid")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "ksx1001" => Ok(Self::ksx1001()),
            other => Err(Error::InvalidConfig(format!("unknown charset {other:?}"))),
        }
    }

    /// One hexadecimal code point per line; blank lines and `#` comments are ignored.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut chars = Vec::new();
        let mut index = HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let cp = u32::from_str_radix(line.trim_start_matches("U+"), 16)
                .map_err(|_| Error::InvalidConfig(format!("bad code point {line:?} in charset {name}")))?;
            let c = char::from_u32(cp).ok_or_else(|| Error::InvalidConfig(format!("bad code point {line:?}")))?;
            decompose(c)?;
            if index.insert(c, chars.len()).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate {line} in charset {name}")));
            }
            chars.push(c);
        }
        Ok(Self { name: name.to_string(), chars, index })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }
}

/// Conditioning attributes of a syllable; characters outside `charset` get no content row.
pub fn char_attributes(c: char, charset: &Charset, strokes: &StrokeTable) -> Result<CharAttributes> {
    let triple = decompose(c)?;
    Ok(CharAttributes {
        char_index: charset.index_of(c),
        tokens: jamo_token_ids(triple)?,
        strokes: stroke_vector(triple, strokes)?,
    })
}

/// Rasterizes one glyph: anti-aliased, scaled so the font's line height fills the
/// area inside the margin (shrunk further if the ink would overflow it), and
/// centered by its ink bounding box. Values are quantized to 8 bits.
pub fn render_glyph(font: &FontVec, font_name: &str, c: char, size: usize) -> Result<GlyphImage> {
    let missing = || Error::GlyphNotInFont { font: font_name.to_string(), codepoint: c as u32 };
    if size == 0 {
        return Err(Error::InvalidDim("image size must be positive".into()));
    }
    let id = font.glyph_id(c);
    if id.0 == 0 {
        return Err(missing());
    }
    let inner = size as f32 * (1.0 - 2.0 * MARGIN as f32);
    let mut scale = inner;
    let probe =
        font.outline_glyph(id.with_scale_and_position(PxScale::from(scale), point(0.0, 0.0))).ok_or_else(missing)?;
    let b = probe.px_bounds();
    let extent = (b.max.x - b.min.x).max(b.max.y - b.min.y);
    if extent > inner {
        scale *= inner / extent;
    }
    let probe =
        font.outline_glyph(id.with_scale_and_position(PxScale::from(scale), point(0.0, 0.0))).ok_or_else(missing)?;
    let b = probe.px_bounds();
    // Integer offsets keep the pixel grid aligned with the probe, so the
    // rasterization is independent of where the glyph lands.
    let dx = (size as f32 / 2.0 - (b.min.x + b.max.x) / 2.0).round();
    let dy = (size as f32 / 2.0 - (b.min.y + b.max.y) / 2.0).round();
    let glyph =
        font.outline_glyph(id.with_scale_and_position(PxScale::from(scale), point(dx, dy))).ok_or_else(missing)?;
    let bounds = glyph.px_bounds();
    let mut bytes = vec![255u8; size * size];
    glyph.draw(|x, y, coverage| {
        let px = bounds.min.x as i64 + x as i64;
        let py = bounds.min.y as i64 + y as i64;
        if (0..size as i64).contains(&px) && (0..size as i64).contains(&py) {
            let ink = (coverage.clamp(0.0, 1.0) * 255.0).round() as u8;
            bytes[py as usize * size + px as usize] = 255 - ink;
        }
    });
    GlyphImage::from_u8(size, &bytes)
}

pub fn load_font(path: &Path) -> Result<FontVec> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    FontVec::try_from_vec(bytes).map_err(|_| Error::BadFont(path.to_path_buf()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Handwritten,
    Printed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphRecord {
    pub font_id: String,
    pub font_file: String,
    pub codepoint: u32,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub jamo: JamoTriple,
    pub strokes: StrokeVector,
    pub split: Split,
    pub category: Category,
}

impl GlyphRecord {
    pub fn character(&self) -> Result<char> {
        char::from_u32(self.codepoint).ok_or(Error::NotHangulSyllable(self.codepoint))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory that image paths are relative to.
    pub root: PathBuf,
    pub records: Vec<GlyphRecord>,
}

impl DatasetManifest {
    /// Checks record uniqueness and that no font appears in both splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut font_split: HashMap<&str, Split> = HashMap::new();
        for r in &self.records {
            if !seen.insert((r.font_id.as_str(), r.codepoint)) {
                return Err(Error::Format(format!("duplicate record for {} U+{:04X}", r.font_id, r.codepoint)));
            }
            if *font_split.entry(&r.font_id).or_insert(r.split) != r.split {
                return Err(Error::Format(format!("font {} appears in both splits", r.font_id)));
            }
        }
        Ok(())
    }

    pub fn image_path(&self, record: &GlyphRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    /// Stored `[0, 1]` image of a record.
    pub fn load_image(&self, record: &GlyphRecord) -> Result<GlyphImage> {
        GlyphImage::load_png(&self.image_path(record))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(Error::io(path))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(Error::io(path))?;
        }
        w.flush().map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::io(path))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(Error::io(path))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self { root, records };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &GlyphRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub size: usize,
    pub seed: u64,
    /// Test fonts drawn per category when no split file is given. At least
    /// one font per category always stays in the training split.
    pub test_fonts_per_category: usize,
    /// File naming one test font id per line; replaces the seeded selection.
    pub split_file: Option<PathBuf>,
    /// Render only the first `max_chars` characters of the charset.
    pub max_chars: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { size: 128, seed: 0, test_fonts_per_category: 5, split_file: None, max_chars: None }
    }
}

struct FontEntry {
    id: String,
    path: PathBuf,
    category: Category,
}

fn is_font_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ttf" | "otf" | "ttc")
    )
}

/// Fonts directly under `dir` count as handwritten; the `handwritten/` and
/// `printed/` subdirectories set the category explicitly.
fn discover_fonts(dir: &Path) -> Result<Vec<FontEntry>> {
    if !dir.is_dir() {
        return Err(Error::EmptyDataset(format!("{} is not a directory", dir.display())));
    }
    let mut fonts = Vec::new();
    let mut scan = |sub: &Path, category: Category| -> Result<()> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(sub)
            .map_err(Error::io(sub))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_font_file(p))
            .collect();
        paths.sort();
        for path in paths {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            fonts.push(FontEntry { id, path, category });
        }
        Ok(())
    };
    scan(dir, Category::Handwritten)?;
    for (name, category) in [("handwritten", Category::Handwritten), ("printed", Category::Printed)] {
        let sub = dir.join(name);
        if sub.is_dir() {
            scan(&sub, category)?;
        }
    }
    let mut ids = HashSet::new();
    for f in &fonts {
        if !ids.insert(f.id.clone()) {
            return Err(Error::InvalidConfig(format!("two fonts share the id {:?}", f.id)));
        }
    }
    fonts.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(fonts)
}

fn test_fonts(fonts: &[FontEntry], cfg: &DatasetConfig) -> Result<HashSet<String>> {
    if let Some(path) = &cfg.split_file {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let names: HashSet<String> =
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect();
        if let Some(unknown) = names.iter().find(|n| !fonts.iter().any(|f| &f.id == *n)) {
            return Err(Error::InvalidConfig(format!("split file names unknown font {unknown:?}")));
        }
        return Ok(names);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = HashSet::new();
    for category in [Category::Handwritten, Category::Printed] {
        let mut ids: Vec<&str> = fonts.iter().filter(|f| f.category == category).map(|f| f.id.as_str()).collect();
        ids.shuffle(&mut rng);
        let n = cfg.test_fonts_per_category.min(ids.len().saturating_sub(1));
        out.extend(ids[..n].iter().map(|s| s.to_string()));
    }
    Ok(out)
}

/// Renders every charset character in every font under `fonts_dir` and writes
/// the images and `manifest.jsonl` into `out_dir`.
pub fn build_dataset(
    fonts_dir: &Path,
    charset: &Charset,
    out_dir: &Path,
    cfg: &DatasetConfig,
) -> Result<DatasetManifest> {
    let fonts = discover_fonts(fonts_dir)?;
    if fonts.is_empty() {
        return Err(Error::EmptyDataset(format!("no font files in {}", fonts_dir.display())));
    }
    let test = test_fonts(&fonts, cfg)?;
    let strokes = StrokeTable::bundled();
    let chars = &charset.chars()[..cfg.max_chars.unwrap_or(charset.len()).min(charset.len())];
    let mut records = Vec::new();
    for entry in &fonts {
        let font = match load_font(&entry.path) {
            Ok(f) => f,
            Err(e) => {
                tracing::warn!("skipping font: {e}");
                continue;
            }
        };
        let dir = out_dir.join("images").join(&entry.id);
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let split = if test.contains(&entry.id) { Split::Test } else { Split::Train };
        let font_file = entry.path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        for &c in chars {
            let img = match render_glyph(&font, &entry.id, c, cfg.size) {
                Ok(img) => img,
                Err(e @ Error::GlyphNotInFont { .. }) => {
                    tracing::warn!("skipping glyph: {e}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            let rel = format!("images/{}/{:04x}.png", entry.id, c as u32);
            img.save_png(&out_dir.join(&rel))?;
            let jamo = decompose(c)?;
            records.push(GlyphRecord {
                font_id: entry.id.clone(),
                font_file: font_file.clone(),
                codepoint: c as u32,
                image_path: rel,
                jamo,
                strokes: stroke_vector(jamo, &strokes)?,
                split,
                category: entry.category,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset("no glyphs were rendered".into()));
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), records };
    manifest.validate()?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Labeled `[-1, 1]` images for extractor pretraining, drawn from the train
/// split (at most `limit`, chosen with `seed`). Labels are font ids when the
/// split has at least two fonts and character identities otherwise.
pub fn extractor_training_set(
    manifest: &DatasetManifest,
    limit: usize,
    seed: u64,
) -> Result<(Vec<GlyphImage>, Vec<usize>)> {
    let mut train: Vec<&GlyphRecord> = manifest.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::EmptyDataset("the manifest has no training records".into()));
    }
    let fonts: BTreeSet<&str> = train.iter().map(|r| r.font_id.as_str()).collect();
    let by_font = fonts.len() >= 2;
    if train.len() > limit {
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        train.truncate(limit);
    }
    let mut classes = BTreeMap::new();
    for r in &train {
        let key = if by_font { r.font_id.clone() } else { r.codepoint.to_string() };
        let next = classes.len();
        classes.entry(key).or_insert(next);
    }
    let mut images = Vec::with_capacity(train.len());
    let mut labels = Vec::with_capacity(train.len());
    for r in train {
        images.push(manifest.load_image(r)?.to_signed());
        labels.push(classes[&if by_font { r.font_id.clone() } else { r.codepoint.to_string() }]);
    }
    Ok((images, labels))
}

/// Samples training items from the train split: a uniformly drawn target glyph
/// and a different glyph of the same font as its style reference.
pub struct GlyphLoader {
    manifest: DatasetManifest,
    charset: Charset,
    strokes: StrokeTable,
    size: usize,
    train: Vec<usize>,
    by_font: HashMap<String, Vec<usize>>,
    cache: HashMap<usize, GlyphImage>,
    cache_capacity: usize,
    warned_single: HashSet<String>,
}

impl GlyphLoader {
    pub fn new(manifest: DatasetManifest, charset: Charset, size: usize) -> Result<Self> {
        let train: Vec<usize> =
            (0..manifest.records.len()).filter(|&i| manifest.records[i].split == Split::Train).collect();
        if train.is_empty() {
            return Err(Error::EmptyDataset("the manifest has no training records".into()));
        }
        let mut by_font: HashMap<String, Vec<usize>> = HashMap::new();
        for &i in &train {
            by_font.entry(manifest.records[i].font_id.clone()).or_default().push(i);
        }
        Ok(Self {
            manifest,
            charset,
            strokes: StrokeTable::bundled(),
            size,
            train,
            by_font,
            cache: HashMap::new(),
            cache_capacity: 8192,
            warned_single: HashSet::new(),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// `[-1, 1]` image of a record, cached while there is room.
    fn image(&mut self, index: usize) -> Result<GlyphImage> {
        if let Some(img) = self.cache.get(&index) {
            return Ok(img.clone());
        }
        let img = self.manifest.load_image(&self.manifest.records[index])?;
        if img.side() != self.size {
            let s = self.size;
            return Err(Error::BadImageShape { expected: format!("{s}x{s}"), got: format!("{0}x{0}", img.side()) });
        }
        let img = img.to_signed();
        if self.cache.len() < self.cache_capacity {
            self.cache.insert(index, img.clone());
        }
        Ok(img)
    }

    /// Record indices of a target and its style reference.
    pub fn draw_pair(&mut self, rng: &mut impl Rng) -> (usize, usize) {
        let target = self.train[rng.random_range(0..self.train.len())];
        let font = &self.manifest.records[target].font_id;
        let pool = &self.by_font[font];
        if pool.len() == 1 {
            if self.warned_single.insert(font.clone()) {
                tracing::warn!("font {font} has a single glyph; it serves as its own style reference");
            }
            return (target, target);
        }
        let pos = pool.iter().position(|&i| i == target).unwrap();
        let mut other = rng.random_range(0..pool.len() - 1);
        if other >= pos {
            other += 1;
        }
        (target, pool[other])
    }

    pub fn item(&mut self, target: usize, style_ref: usize) -> Result<TrainItem> {
        let c = self.manifest.records[target].character()?;
        Ok(TrainItem {
            attrs: char_attributes(c, &self.charset, &self.strokes)?,
            style_ref: self.image(style_ref)?,
            target: self.image(target)?,
        })
    }
}

impl BatchSource for GlyphLoader {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TrainItem>> {
        (0..batch_size)
            .map(|_| {
                let (t, s) = self.draw_pair(rng);
                self.item(t, s)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ksx1001_has_2350_syllables() {
        let cs = Charset::ksx1001();
        assert_eq!(cs.len(), 2350);
        assert_eq!(cs.chars()[0], '가');
        assert_eq!(cs.index_of('가'), Some(0));
        assert_eq!(cs.index_of('\u{D79D}'), Some(2349));
        assert_eq!(cs.index_of('힣'), None);
        assert!(Charset::by_name("gb2312").is_err());
    }

    #[test]
    fn charset_rejects_duplicates_and_non_hangul() {
        assert!(Charset::parse("x", "AC00\nAC00\n").is_err());
        assert!(Charset::parse("x", "0041\n").is_err());
        assert_eq!(Charset::parse("x", "# c\nAC01\n\n").unwrap().len(), 1);
    }

    #[test]
    fn draw_pair_prefers_a_different_glyph() {
        let record = |font: &str, cp: u32| GlyphRecord {
            font_id: font.into(),
            font_file: format!("{font}.ttf"),
            codepoint: cp,
            image_path: String::new(),
            jamo: decompose(char::from_u32(cp).unwrap()).unwrap(),
            strokes: StrokeVector::new([1, 2, 0]),
            split: Split::Train,
            category: Category::Printed,
        };
        let manifest = DatasetManifest {
            root: PathBuf::new(),
            records: vec![record("a", 0xAC00), record("a", 0xAC01), record("a", 0xAC02), record("b", 0xAC00)],
        };
        let mut loader = GlyphLoader::new(manifest, Charset::ksx1001(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (t, s) = loader.draw_pair(&mut rng);
            let recs = &loader.manifest.records;
            assert_eq!(recs[t].font_id, recs[s].font_id);
            if recs[t].font_id == "a" {
                assert_ne!(t, s);
            } else {
                assert_eq!(t, s);
            }
        }
    }
}
