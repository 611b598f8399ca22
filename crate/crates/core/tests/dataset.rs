use std::path::{Path, PathBuf};

use jamodiff::dataset::{
    build_dataset, load_font, render_glyph, Category, Charset, DatasetConfig, DatasetManifest, GlyphLoader, Split,
    MANIFEST_FILE,
};
use jamodiff::training::BatchSource;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fonts_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/fonts")
}

fn light_font() -> PathBuf {
    fonts_dir().join("NanumGothicLight.ttf")
}

/// A fonts directory holding copies of the bundled fonts under new names.
fn font_dir_with(names: &[(&str, &str)]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (src, dst) in names {
        let dst = dir.path().join(dst);
        std::fs::create_dir_all(dst.parent().unwrap()).unwrap();
        std::fs::copy(fonts_dir().join(src), dst).unwrap();
    }
    dir
}

#[test]
fn render_has_ink_and_white_margin() {
    let font = load_font(&light_font()).unwrap();
    for size in [32, 128] {
        let img = render_glyph(&font, "light", '가', size).unwrap();
        assert!(img.pixels().iter().cloned().fold(f64::INFINITY, f64::min) < 0.5);
        let s = size - 1;
        for (r, c) in [(0, 0), (0, s), (s, 0), (s, s)] {
            assert_eq!(img.get(r, c), 1.0);
        }
        let margin = (size as f64 * 0.08).floor() as usize;
        for r in 0..size {
            for c in 0..size {
                if r < margin || c < margin || r >= size - margin || c >= size - margin {
                    assert_eq!(img.get(r, c), 1.0, "ink in margin at {r},{c} (size {size})");
                }
            }
        }
    }
}

#[test]
fn render_is_deterministic() {
    let font = load_font(&light_font()).unwrap();
    let a = render_glyph(&font, "light", '한', 128).unwrap();
    let b = render_glyph(&load_font(&light_font()).unwrap(), "light", '한', 128).unwrap();
    assert_eq!(a.to_u8(), b.to_u8());
}

#[test]
fn missing_glyph_is_reported() {
    let font = load_font(&light_font()).unwrap();
    // A private-use code point no font maps.
    let err = render_glyph(&font, "light", '\u{F8FF}', 32).unwrap_err();
    assert!(matches!(err, jamodiff::Error::GlyphNotInFont { .. }), "{err}");
}

#[test]
fn full_charset_for_three_fonts() {
    let fonts = font_dir_with(&[
        ("NanumGothicLight.ttf", "a.ttf"),
        ("NanumGothicExtraBold.ttf", "b.ttf"),
        ("NanumGothicLight.ttf", "printed/c.ttf"),
    ]);
    let out = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { size: 32, ..Default::default() };
    let manifest = build_dataset(fonts.path(), &Charset::ksx1001(), out.path(), &cfg).unwrap();
    assert_eq!(manifest.records.len(), 3 * 2350);
    assert_eq!(manifest.records.iter().filter(|r| r.font_id == "a").count(), 2350);
    assert!(manifest.records.iter().all(|r| manifest.image_path(r).exists()));
    assert_eq!(manifest.records.iter().filter(|r| r.category == Category::Printed).count(), 2350);

    // One of the two handwritten fonts is held out; the lone printed font stays in training.
    let test_fonts: std::collections::HashSet<_> = manifest.split(Split::Test).map(|r| r.font_id.clone()).collect();
    assert_eq!(test_fonts.len(), 1);
    assert!(!test_fonts.contains("c"));
    for f in &test_fonts {
        assert!(manifest.split(Split::Train).all(|r| &r.font_id != f));
    }

    let back = DatasetManifest::read(&out.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(back, manifest);

    // Style references come from the same font and almost never repeat the target.
    let mut loader = GlyphLoader::new(manifest.clone(), Charset::ksx1001(), 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut same = 0;
    for _ in 0..10_000 {
        let (t, s) = loader.draw_pair(&mut rng);
        assert_eq!(manifest.records[t].font_id, manifest.records[s].font_id);
        assert_eq!(manifest.records[t].split, Split::Train);
        same += usize::from(t == s);
    }
    assert!(same < 100, "{same} self-references");
}

#[test]
fn split_file_marks_named_font_as_test() {
    let fonts = font_dir_with(&[("NanumGothicLight.ttf", "a.ttf"), ("NanumGothicExtraBold.ttf", "b.ttf")]);
    let split = fonts.path().join("split.txt");
    std::fs::write(&split, "# held out\nb\n").unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { size: 32, max_chars: Some(5), split_file: Some(split), ..Default::default() };
    let manifest = build_dataset(fonts.path(), &Charset::ksx1001(), out.path(), &cfg).unwrap();
    assert_eq!(manifest.records.len(), 10);
    for r in &manifest.records {
        assert_eq!(r.split == Split::Test, r.font_id == "b");
    }
}

#[test]
fn seeded_build_is_byte_identical() {
    let fonts = font_dir_with(&[
        ("NanumGothicLight.ttf", "a.ttf"),
        ("NanumGothicExtraBold.ttf", "b.ttf"),
        ("NanumGothicLight.ttf", "c.ttf"),
    ]);
    let cfg = DatasetConfig { size: 32, seed: 7, max_chars: Some(8), ..Default::default() };
    let read = |dir: &Path| {
        build_dataset(fonts.path(), &Charset::ksx1001(), dir, &cfg).unwrap();
        let manifest = std::fs::read(dir.join(MANIFEST_FILE)).unwrap();
        let image = std::fs::read(dir.join("images/a/ac00.png")).unwrap();
        (manifest, image)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn empty_or_missing_font_dir_is_an_empty_dataset() {
    let out = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    let cs = Charset::ksx1001();
    let cfg = DatasetConfig::default();
    for dir in [empty.path().to_path_buf(), empty.path().join("nope")] {
        let err = build_dataset(&dir, &cs, out.path(), &cfg).unwrap_err();
        assert!(matches!(err, jamodiff::Error::EmptyDataset(_)), "{err}");
    }
}

#[test]
fn batches_are_signed_same_font_and_reproducible() {
    let fonts = font_dir_with(&[("NanumGothicLight.ttf", "a.ttf"), ("NanumGothicExtraBold.ttf", "b.ttf")]);
    let out = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { size: 32, max_chars: Some(12), test_fonts_per_category: 0, ..Default::default() };
    let manifest = build_dataset(fonts.path(), &Charset::ksx1001(), out.path(), &cfg).unwrap();
    let batch = |seed| {
        let mut loader = GlyphLoader::new(manifest.clone(), Charset::ksx1001(), 32).unwrap();
        loader.next_batch(16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    };
    let a = batch(3);
    assert_eq!(a.len(), 16);
    assert_eq!(a, batch(3));
    for item in &a {
        assert!(item.target.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(item.target.pixels().iter().any(|&v| v < 0.0));
        assert!(item.attrs.char_index.unwrap() < 12);
        assert_ne!(item.target, item.style_ref);
    }
    assert!(GlyphLoader::new(manifest, Charset::ksx1001(), 64)
        .unwrap()
        .next_batch(1, &mut ChaCha8Rng::seed_from_u64(0))
        .is_err());
}
