//! Labeled rasters: decoding, directory datasets, and the synthetic motif set.

mod synth;

use std::collections::HashSet;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub use synth::{export_dataset, synth_generate, SYNTH_SIZE};

/// Class directory names, in label order. Only `EA` is malignant.
pub const CLASS_NAMES: [&str; 4] = ["NE", "EP", "EH", "EA"];
pub const MALIGNANT_CLASS: usize = 3;

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Raster({}x{})", self.width, self.height)
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "raster {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, y, self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Self {
        let row = self.width * 3;
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            data.extend_from_slice(&self.data[y * row..(y + 1) * row]);
        }
        Self { data, ..*self }
    }
}

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn to_raster(&self) -> Raster {
        let data = self.data.iter().flat_map(|&b| [if b { 255 } else { 0 }; 3]).collect();
        Raster {
            width: self.width,
            height: self.height,
            data,
        }
    }

    fn from_raster(r: &Raster) -> Self {
        Self {
            width: r.width,
            height: r.height,
            data: r.data.chunks(3).map(|p| p[0] >= 128).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    /// Relative path without extension, e.g. `EH/0007`.
    pub id: String,
    pub label: usize,
    pub pixels: Raster,
    pub mask: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Directory(PathBuf),
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for im in &self.images {
            counts[im.label] += 1;
        }
        counts
    }

    /// Images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// What `load_dataset` skipped or found odd.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub warnings: Vec<String>,
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterFormat {
    Png,
    Jpeg,
}

/// Decode a PNG or baseline JPEG stream.
///
/// The codecs report failures without a position, so the offset is 0 when the
/// format is not recognized and the stream length when the stream is cut
/// short or otherwise malformed.
pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let format = match image::guess_format(bytes) {
        Ok(f @ (ImageFormat::Png | ImageFormat::Jpeg)) => f,
        Ok(other) => return Err(Error::format("raster", 0, format!("unsupported format {other:?}"))),
        Err(_) => return Err(Error::format("raster", 0, "not a PNG or JPEG stream")),
    };
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::format("raster", bytes.len(), e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Raster::new(w, h, rgb.into_raw())
}

/// Encode as PNG. JPEG is decode-only.
pub fn encode_raster(raster: &Raster, format: RasterFormat) -> Result<Vec<u8>> {
    if format == RasterFormat::Jpeg {
        return Err(Error::contract("JPEG encoding is not supported; use PNG"));
    }
    let img = RgbImage::from_raw(raster.width as u32, raster.height as u32, raster.data.clone())
        .ok_or_else(|| Error::dim("raster buffer does not match its dimensions"))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::format("raster", 0, e.to_string()))?;
    Ok(out.into_inner())
}

/// Single-channel 8-bit PNG.
pub fn encode_gray_png(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| Error::dim("gray buffer does not match its dimensions"))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::format("raster", 0, e.to_string()))?;
    Ok(out.into_inner())
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

fn is_raster_path(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Load `<root>/{NE,EP,EH,EA}/*.{png,jpg,jpeg}`, ordered by relative path.
///
/// Masks are picked up from `<root>/masks/<id>.png` when present.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<(Dataset, LoadReport)> {
    let root = root.as_ref();
    let mut report = LoadReport::default();
    let mut files = Vec::new();
    for (label, name) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(Error::Config(format!("missing class directory {}", dir.display())));
        }
        let mut count = 0;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_file() && is_raster_path(&path) {
                let file = path.file_name().and_then(|f| f.to_str()).map(str::to_owned);
                match file {
                    Some(file) => {
                        files.push((format!("{name}/{file}"), label, path));
                        count += 1;
                    }
                    None => {
                        report.skipped += 1;
                        report.warnings.push(format!("{}: file name is not UTF-8", path.display()));
                    }
                }
            }
        }
        if count == 0 {
            report.warnings.push(format!("class {name} has no images"));
        }
    }
    // `String` ordering is by code point.
    files.sort_by(|a, b| a.0.cmp(&b.0));

    let mut images = Vec::with_capacity(files.len());
    let mut seen = HashSet::new();
    for (rel, label, path) in files {
        let id = match rel.rfind('.') {
            Some(dot) => rel[..dot].to_string(),
            None => rel.clone(),
        };
        let pixels = match read_raster(&path) {
            Ok(r) => r,
            Err(e) => {
                report.skipped += 1;
                report.warnings.push(format!("{rel}: skipped: {e}"));
                continue;
            }
        };
        let mask_path = root.join("masks").join(format!("{id}.png"));
        let mask = if mask_path.is_file() {
            match read_raster(&mask_path) {
                Ok(m) if m.width == pixels.width && m.height == pixels.height => Some(Mask::from_raster(&m)),
                Ok(_) => {
                    report.warnings.push(format!("{id}: mask size differs from image, ignored"));
                    None
                }
                Err(e) => {
                    report.warnings.push(format!("{id}: mask unreadable, ignored: {e}"));
                    None
                }
            }
        } else {
            None
        };
        if !seen.insert(id.clone()) {
            report.skipped += 1;
            report.warnings.push(format!("{rel}: duplicate id {id}, skipped"));
            continue;
        }
        images.push(LabeledImage { id, label, pixels, mask });
    }
    if images.is_empty() {
        return Err(Error::Input(format!("no decodable images under {}", root.display())));
    }
    Ok((
        Dataset {
            images,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            provenance: Provenance::Directory(root.to_path_buf()),
        },
        report,
    ))
}
