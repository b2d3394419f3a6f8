//! Severity-indexed image perturbations for robustness sweeps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Brightness,
    Contrast,
    Darken,
    Dither,
    Jpeg2000,
    PinkNoise,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::Brightness,
        PerturbationKind::Contrast,
        PerturbationKind::Darken,
        PerturbationKind::Dither,
        PerturbationKind::Jpeg2000,
        PerturbationKind::PinkNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Brightness => "brightness",
            PerturbationKind::Contrast => "contrast",
            PerturbationKind::Darken => "darken",
            PerturbationKind::Dither => "dither",
            PerturbationKind::Jpeg2000 => "jpeg2000",
            PerturbationKind::PinkNoise => "pink_noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation kind {s:?}")))
    }

    /// Human-readable definition of the severity scale.
    pub fn formula(self) -> &'static str {
        match self {
            PerturbationKind::Brightness => "x * (1 + 0.15 s)",
            PerturbationKind::Contrast => "mean + (x - mean) * (1 + 0.2 s), per channel",
            PerturbationKind::Darken => "x * (1 - 0.12 s)",
            PerturbationKind::Dither => "Floyd-Steinberg to 8 - s bits per channel",
            PerturbationKind::Jpeg2000 => "JPEG2000 round trip at ratio 10 * 2^(s - 1)",
            PerturbationKind::PinkNoise => "x + 1/f noise with std 0.02 s",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub severity: u8,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self { kind, severity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > MAX_SEVERITY {
            return Err(Error::Config(format!("severity {} outside 0..={MAX_SEVERITY}", self.severity)));
        }
        Ok(())
    }

    /// JPEG2000 compression ratio of this severity.
    pub fn jpeg2000_ratio(&self) -> f64 {
        10.0 * libm::pow(2.0, self.severity as f64 - 1.0)
    }
}

/// Lossy JPEG2000 encode/decode supplied by the host environment.
pub trait Jpeg2000Codec {
    fn round_trip(&self, image: &RgbImage, ratio: f64) -> Result<RgbImage>;
}

/// Applies `spec` to `image`. Severity 0 returns an exact copy for every kind.
pub fn perturb(image: &RgbImage, spec: &PerturbationSpec, codec: Option<&dyn Jpeg2000Codec>) -> Result<RgbImage> {
    spec.validate()?;
    if spec.kind == PerturbationKind::Jpeg2000 && codec.is_none() {
        return Err(Error::UnsupportedPerturbation("jpeg2000 requires a codec and none is available".into()));
    }
    if spec.severity == 0 {
        return Ok(image.clone());
    }
    let s = spec.severity as f64;
    let mut out = image.clone();
    match spec.kind {
        PerturbationKind::Brightness => scale(&mut out, 1.0 + 0.15 * s),
        PerturbationKind::Darken => scale(&mut out, 1.0 - 0.12 * s),
        PerturbationKind::Contrast => {
            let plane = image.height() * image.width();
            for c in 0..3 {
                let p = out.plane_mut(c);
                let mean = p.iter().sum::<f64>() / plane as f64;
                p.iter_mut().for_each(|v| *v = (mean + (*v - mean) * (1.0 + 0.2 * s)).clamp(0.0, 1.0));
            }
        }
        PerturbationKind::Dither => dither(&mut out, 8 - spec.severity as u32),
        PerturbationKind::Jpeg2000 => {
            let codec = codec.expect("checked above");
            out = codec.round_trip(image, spec.jpeg2000_ratio())?;
            if out.height() != image.height() || out.width() != image.width() {
                return Err(Error::Backend("jpeg2000 codec changed the image size".into()));
            }
            out.clamp_unit();
        }
        PerturbationKind::PinkNoise => {
            let (h, w) = (image.height(), image.width());
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for c in 0..3 {
                let noise = pink_noise(h, w, &mut rng);
                let p = out.plane_mut(c);
                for (v, n) in p.iter_mut().zip(noise) {
                    *v = (*v + 0.02 * s * n).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

fn scale(image: &mut RgbImage, factor: f64) {
    image.planes_mut().iter_mut().for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
}

fn dither(image: &mut RgbImage, bits: u32) {
    let levels = ((1u32 << bits) - 1) as f64;
    let (h, w) = (image.height(), image.width());
    for c in 0..3 {
        let p = image.plane_mut(c);
        let mut buf: Vec<f64> = p.to_vec();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let old = buf[i];
                let new = (libm::round(old.clamp(0.0, 1.0) * levels) / levels).clamp(0.0, 1.0);
                buf[i] = new;
                let err = old - new;
                if x + 1 < w {
                    buf[i + 1] += err * 7.0 / 16.0;
                }
                if y + 1 < h {
                    if x > 0 {
                        buf[i + w - 1] += err * 3.0 / 16.0;
                    }
                    buf[i + w] += err * 5.0 / 16.0;
                    if x + 1 < w {
                        buf[i + w + 1] += err / 16.0;
                    }
                }
            }
        }
        p.copy_from_slice(&buf);
    }
}

/// Zero-mean, unit-std noise with an approximately 1/f spectrum: a sum of
/// octaves of bilinearly upsampled white noise, each weighted by the square
/// root of its cell size.
fn pink_noise(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut cell = 1usize;
    while cell <= h.max(w) {
        let (gh, gw) = (h / cell + 2, w / cell + 2);
        let grid: Vec<f64> = (0..gh * gw).map(|_| StandardNormal.sample(rng)).collect();
        let weight = libm::sqrt(cell as f64);
        for y in 0..h {
            let fy = y as f64 / cell as f64;
            let (y0, ty) = (fy as usize, fy - libm::floor(fy));
            for x in 0..w {
                let fx = x as f64 / cell as f64;
                let (x0, tx) = (fx as usize, fx - libm::floor(fx));
                let g = |yy: usize, xx: usize| grid[yy * gw + xx];
                let v = (1.0 - ty) * ((1.0 - tx) * g(y0, x0) + tx * g(y0, x0 + 1))
                    + ty * ((1.0 - tx) * g(y0 + 1, x0) + tx * g(y0 + 1, x0 + 1));
                out[y * w + x] += weight * v;
            }
        }
        cell *= 2;
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = libm::sqrt(out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
    let inv = if std > 0.0 { 1.0 / std } else { 0.0 };
    out.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    out
}

/// Summary of a perturbation for report output.
pub fn describe(spec: &PerturbationSpec) -> String {
    format!("{} severity {}: {}", spec.kind.name(), spec.severity, spec.kind.formula())
}
