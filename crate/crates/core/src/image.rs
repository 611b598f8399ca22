//! Square grayscale glyph images and their PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Square grid of pixels, row-major.
///
/// Files store `[0, 1]` (white = 1); the diffusion process works on `[-1, 1]`.
/// The type does not track which convention a value uses.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphImage {
    side: usize,
    pixels: Vec<f64>,
}

impl GlyphImage {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(Error::BadImageShape {
                expected: format!("{side}x{side}"),
                got: format!("{} pixels", pixels.len()),
            });
        }
        Ok(Self { side, pixels })
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self { side, pixels: vec![value; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { side: self.side, pixels: self.pixels.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    /// `[0, 1]` to `[-1, 1]`.
    pub fn to_signed(&self) -> Self {
        self.map(|v| 2.0 * v - 1.0)
    }

    /// `[-1, 1]` to `[0, 1]`.
    pub fn to_unit(&self) -> Self {
        self.map(|v| (v + 1.0) / 2.0)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.side == other.side {
            Ok(())
        } else {
            Err(Error::BadImageShape { expected: format!("{0}x{0}", self.side), got: format!("{0}x{0}", other.side) })
        }
    }

    /// Box-filter reduction by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.side.is_multiple_of(factor) {
            return Err(Error::BadImageShape {
                expected: format!("side divisible by {factor}"),
                got: format!("{0}x{0}", self.side),
            });
        }
        let side = self.side / factor;
        let norm = (factor * factor) as f64;
        let mut pixels = vec![0.0; side * side];
        for (i, p) in pixels.iter_mut().enumerate() {
            let (r, c) = (i / side, i % side);
            let mut acc = 0.0;
            for dy in 0..factor {
                let row = &self.pixels[(r * factor + dy) * self.side + c * factor..][..factor];
                acc += row.iter().sum::<f64>();
            }
            *p = acc / norm;
        }
        Ok(Self { side, pixels })
    }

    /// Quantizes `[0, 1]` values to 8 bits, clamping anything outside.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(side: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(side, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Writes an 8-bit grayscale PNG of the `[0, 1]` values.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_gray_png(path, self.side as u32, self.side as u32, &self.to_u8())
    }

    /// Reads an 8-bit grayscale PNG (RGB/RGBA are converted by luma) into `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let png_err = |e: png::DecodingError| Error::Png { path: path.to_path_buf(), message: e.to_string() };
        let file = File::open(path).map_err(Error::io(path))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = decoder.read_info().map_err(png_err)?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        if w != h {
            return Err(Error::BadImageShape { expected: "square image".into(), got: format!("{w}x{h}") });
        }
        let channels = info.color_type.samples();
        let bytes = &buf[..info.buffer_size()];
        let gray: Vec<u8> = match info.color_type {
            png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
                bytes.iter().step_by(channels).copied().collect()
            }
            png::ColorType::Rgb | png::ColorType::Rgba => bytes
                .chunks(channels)
                .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8)
                .collect(),
            png::ColorType::Indexed => unreachable!("expanded by normalize_to_color8"),
        };
        Self::from_u8(w, &gray)
    }
}

pub(crate) fn write_gray_png(path: &Path, width: u32, height: u32, bytes: &[u8]) -> Result<()> {
    let png_err = |e: png::EncodingError| Error::Png { path: path.to_path_buf(), message: e.to_string() };
    let file = File::create(path).map_err(Error::io(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Lays equally sized `[0, 1]` images out on a white grid with a 2-pixel gutter.
pub fn contact_sheet(images: &[GlyphImage], columns: usize) -> Result<(u32, u32, Vec<u8>)> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidConfig("contact sheet needs at least one image".into()));
    };
    let side = first.side();
    let columns = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(columns);
    let gutter = 2;
    let width = columns * side + (columns + 1) * gutter;
    let height = rows * side + (rows + 1) * gutter;
    let mut canvas = vec![255u8; width * height];
    for (i, img) in images.iter().enumerate() {
        first.check_same_shape(img)?;
        let x0 = gutter + (i % columns) * (side + gutter);
        let y0 = gutter + (i / columns) * (side + gutter);
        let bytes = img.to_u8();
        for r in 0..side {
            canvas[(y0 + r) * width + x0..][..side].copy_from_slice(&bytes[r * side..][..side]);
        }
    }
    Ok((width as u32, height as u32, canvas))
}

pub fn save_contact_sheet(images: &[GlyphImage], columns: usize, path: &Path) -> Result<()> {
    let (w, h, bytes) = contact_sheet(images, columns)?;
    write_gray_png(path, w, h, &bytes)
}
