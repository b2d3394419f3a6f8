//! Splice, copy-move, inpaint and self-blend generators.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scene::gaussian_blur;
use super::{Provenance, Sample};
use crate::error::{Error, Result};
use crate::image::{Label, Mask, RgbImage};

/// Placement attempts before copy-move gives up.
pub const COPY_MOVE_TRIES: usize = 100;
const REGION_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Region area bounds as fractions of the image area.
    pub min_area: f64,
    pub max_area: f64,
    /// Gaussian σ of the blend-mask feathering, in pixels.
    pub feather_sigma: f64,
    pub inpaint_iterations: usize,
    pub inpaint_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { min_area: 0.01, max_area: 0.30, feather_sigma: 2.0, inpaint_iterations: 200, inpaint_noise: 0.004 }
    }
}

/// Radius beyond which the feathered alpha is exactly zero.
#[cfg(test)]
pub(crate) fn feather_radius(sigma: f64) -> usize {
    libm::ceil(3.0 * sigma) as usize
}

fn point_in_polygon(y: f64, x: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((yi, xi), (yj, xj)) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Random star-shaped polygon covering `[min_area, max_area]` of the image.
fn random_region<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R, cfg: &GeneratorConfig) -> Result<Mask> {
    let total = (h * w) as f64;
    for _ in 0..REGION_TRIES {
        let frac = rng.random_range(cfg.min_area..cfg.max_area);
        let r = libm::sqrt(frac * total / core::f64::consts::PI);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let n = rng.random_range(5..10);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..core::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let poly: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let rr = r * rng.random_range(0.7..1.3);
                (cy + rr * libm::sin(a), cx + rr * libm::cos(a))
            })
            .collect();
        let mut mask = Mask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if point_in_polygon(y as f64 + 0.5, x as f64 + 0.5, &poly) {
                    mask.set(y, x, true);
                }
            }
        }
        let area = mask.count() as f64 / total;
        if mask.count() > 0 && area >= cfg.min_area && area <= cfg.max_area {
            return Ok(mask);
        }
    }
    Err(Error::GenerationFailure { attempts: REGION_TRIES, reason: "no region within the area bounds".into() })
}

fn feathered_alpha(mask: &Mask, sigma: f64) -> Vec<f64> {
    let hard: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    gaussian_blur(&hard, mask.height(), mask.width(), sigma, false)
}

/// `alpha · top + (1 - alpha) · base`; pixels with zero alpha copy `base`.
fn blend(base: &RgbImage, top: &RgbImage, alpha: &[f64]) -> RgbImage {
    let plane = base.height() * base.width();
    let mut out = base.clone();
    for c in 0..3 {
        let (b, t) = (base.plane(c), top.plane(c));
        let o = out.plane_mut(c);
        for i in 0..plane {
            if alpha[i] != 0.0 {
                o[i] = (alpha[i] * t[i] + (1.0 - alpha[i]) * b[i]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn check_same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::InvalidInput(format!(
            "host {}x{} and donor {}x{} differ in size",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn manipulated(image: RgbImage, mask: Mask, generator: &str) -> Sample {
    Sample { image, mask, label: Label::Manipulated, provenance: Provenance::new(generator, 0) }
}

/// Pastes a polygon of `donor` into `host` through a feathered mask.
pub fn synth_splice<R: Rng + ?Sized>(host: &RgbImage, donor: &RgbImage, rng: &mut R, cfg: &GeneratorConfig) -> Result<Sample> {
    check_same_dims(host, donor)?;
    let mask = random_region(host.height(), host.width(), rng, cfg)?;
    let alpha = feathered_alpha(&mask, cfg.feather_sigma);
    Ok(manipulated(blend(host, donor, &alpha), mask, "splice"))
}

fn shifted(mask: &Mask, dy: isize, dx: isize) -> Option<Mask> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                    return None;
                }
                out.set(ny as usize, nx as usize, true);
            }
        }
    }
    Some(out)
}

/// Duplicates a polygon of `image` at a disjoint offset.
pub fn synth_copy_move<R: Rng + ?Sized>(image: &RgbImage, rng: &mut R, cfg: &GeneratorConfig) -> Result<Sample> {
    let (h, w) = (image.height(), image.width());
    let source = random_region(h, w, rng, cfg)?;
    for _ in 0..COPY_MOVE_TRIES {
        let dy = rng.random_range(-(h as i64) + 1..h as i64) as isize;
        let dx = rng.random_range(-(w as i64) + 1..w as i64) as isize;
        let Some(dest) = shifted(&source, dy, dx) else { continue };
        if dest.bits().iter().zip(source.bits()).any(|(a, b)| *a && *b) {
            continue;
        }
        // Whole image moved by (dy, dx), edges replicated.
        let mut moved = image.clone();
        for c in 0..3 {
            let src = image.plane(c);
            let dst = moved.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                    dst[y * w + x] = src[sy * w + sx];
                }
            }
        }
        let alpha = feathered_alpha(&dest, cfg.feather_sigma);
        return Ok(manipulated(blend(image, &moved, &alpha), dest, "copymove"));
    }
    Err(Error::GenerationFailure {
        attempts: COPY_MOVE_TRIES,
        reason: "no non-overlapping destination for the copied region".into(),
    })
}

/// Replaces a polygon by a diffusion fill of its surround plus faint noise.
pub fn synth_inpaint<R: Rng + ?Sized>(image: &RgbImage, rng: &mut R, cfg: &GeneratorConfig) -> Result<Sample> {
    let (h, w) = (image.height(), image.width());
    let mask = random_region(h, w, rng, cfg)?;
    let region: Vec<usize> = (0..h * w).filter(|&i| mask.bits()[i]).collect();
    let mut out = image.clone();
    for c in 0..3 {
        let p = out.plane_mut(c);
        // Start from the mean of the pixels bordering the region.
        let ring = mask.dilate(1);
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..h * w {
            if ring.bits()[i] && !mask.bits()[i] {
                s += p[i];
                n += 1;
            }
        }
        let start = if n > 0 { s / n as f64 } else { 0.5 };
        for &i in &region {
            p[i] = start;
        }
        for _ in 0..cfg.inpaint_iterations {
            let prev = p.to_vec();
            for &i in &region {
                let (y, x) = (i / w, i % w);
                let up = prev[y.saturating_sub(1) * w + x];
                let down = prev[(y + 1).min(h - 1) * w + x];
                let left = prev[y * w + x.saturating_sub(1)];
                let right = prev[y * w + (x + 1).min(w - 1)];
                p[i] = 0.25 * (up + down + left + right);
            }
        }
        for &i in &region {
            let n: f64 = StandardNormal.sample(rng);
            p[i] = (p[i] + cfg.inpaint_noise * n).clamp(0.0, 1.0);
        }
    }
    Ok(manipulated(out, mask, "inpaint"))
}

/// Mild transform of a region of the image itself, blended back through a
/// feathered mask.
pub fn self_blend<R: Rng + ?Sized>(image: &RgbImage, rng: &mut R, cfg: &GeneratorConfig) -> Result<Sample> {
    let (h, w) = (image.height(), image.width());
    let mask = random_region(h, w, rng, cfg)?;
    let mut top = image.clone();
    match rng.random_range(0..3) {
        0 => {
            for c in 0..3 {
                let shift = rng.random_range(0.03..0.08) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                top.plane_mut(c).iter_mut().for_each(|v| *v = (*v + shift).clamp(0.0, 1.0));
            }
        }
        1 => {
            let sigma = rng.random_range(1.0..2.0);
            for c in 0..3 {
                let b = gaussian_blur(image.plane(c), h, w, sigma, true);
                top.plane_mut(c).copy_from_slice(&b);
            }
        }
        _ => {
            let levels = ((1u32 << rng.random_range(3..6)) - 1) as f64;
            top.planes_mut().iter_mut().for_each(|v| *v = libm::round(*v * levels) / levels);
        }
    }
    let alpha = feathered_alpha(&mask, cfg.feather_sigma);
    Ok(manipulated(blend(image, &top, &alpha), mask, "selfblend"))
}
