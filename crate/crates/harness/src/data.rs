//! Dataset manifests (JSON lines) and PNG image/mask I/O.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use prx_core::datakit::{generate, GeneratorConfig, Provenance, Sample, SynthKind};
use prx_core::image::{Label, Mask, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One dataset entry. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub image_path: String,
    pub mask_path: Option<String>,
    pub label: Label,
    pub provenance: Provenance,
}

impl ManifestRow {
    fn check(&self) -> std::result::Result<(), String> {
        match (self.label, &self.mask_path) {
            (Label::Authentic, Some(_)) => Err("authentic row must have a null mask_path".into()),
            (Label::Manipulated, None) => Err("manipulated row needs a mask_path".into()),
            _ => Ok(()),
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let row: ManifestRow =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{} line {n}: {e}", path.display())))?;
        row.check().map_err(|m| Error::Data(format!("{} line {n}: {m}", path.display())))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    write_rows(rows, path, false)
}

/// Appends rows, creating the file if needed.
pub fn append_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    write_rows(rows, path, true)
}

fn write_rows(rows: &[ManifestRow], path: &Path, append: bool) -> Result<()> {
    for row in rows {
        row.check().map_err(Error::Data)?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("manifest row serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_rgb8(h as usize, w as usize, img.as_raw())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_rgb(image: &RgbImage, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Reads an 8-bit mask; values ≥ 128 are manipulated.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Mask::from_bits(h as usize, w as usize, img.as_raw().iter().map(|&v| v >= 128).collect())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes an 8-bit mask, 255 = manipulated.
pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("buffer matches dimensions");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// A manifest row with its pixels loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub image_path: PathBuf,
    pub image: RgbImage,
    pub mask: Mask,
    pub label: Label,
}

pub fn load_samples(manifest: &Path) -> Result<Vec<LoadedSample>> {
    let rows = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    rows.iter()
        .map(|row| {
            let image_path = resolve(base, &row.image_path);
            let image = read_rgb(&image_path)?;
            let mask = match &row.mask_path {
                Some(m) => read_mask(&resolve(base, m))?,
                None => Mask::empty(image.height(), image.width()),
            };
            if (mask.height(), mask.width()) != (image.height(), image.width()) {
                return Err(Error::Data(format!("mask of {} does not match the image size", row.image_path)));
            }
            if row.label == Label::Manipulated && mask.is_empty() {
                return Err(Error::Data(format!("manipulated sample {} has an empty mask", row.image_path)));
            }
            Ok(LoadedSample { id: row.image_path.clone(), image_path, image, mask, label: row.label })
        })
        .collect()
}

/// Writes `samples` as PNGs under `dir/images` and `dir/masks` and appends
/// them to `dir/manifest.jsonl`. Returns the manifest path.
pub fn write_samples(samples: &[Sample], dir: &Path, stem: &str) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate().map_err(|e| Error::Data(e.to_string()))?;
        let name = format!("{stem}_{i:04}.png");
        let image_path = format!("images/{name}");
        write_rgb(&s.image, &dir.join(&image_path))?;
        let mask_path = match s.label {
            Label::Authentic => None,
            Label::Manipulated => {
                let p = format!("masks/{name}");
                write_mask(&s.mask, &dir.join(&p))?;
                Some(p)
            }
        };
        rows.push(ManifestRow { image_path, mask_path, label: s.label, provenance: s.provenance.clone() });
    }
    let manifest = dir.join("manifest.jsonl");
    append_manifest(&rows, &manifest)?;
    Ok(manifest)
}

/// Generates `n` samples cycling through `kinds` (sample `i` uses seed
/// `seed + i`) and appends them to `dir/manifest.jsonl`.
pub fn synthesize(kinds: &[SynthKind], n: usize, seed: u64, size: usize, dir: &Path) -> Result<PathBuf> {
    if kinds.is_empty() {
        return Err(Error::Config("no sample kinds requested".into()));
    }
    let cfg = GeneratorConfig::default();
    let samples = (0..n)
        .map(|i| generate(kinds[i % kinds.len()], size, size, seed.wrapping_add(i as u64), &cfg).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let stem = if kinds.len() == 1 { kinds[0].name() } else { "mixed" };
    write_samples(&samples, dir, &format!("{stem}_{seed}"))
}
