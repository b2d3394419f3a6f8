//! Procedural "authentic" scenes: smooth gradients, a few flat shapes and
//! per-image sensor noise.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::image::RgbImage;

/// Separable Gaussian blur of one `h × w` plane. Borders replicate the edge
/// value when `replicate` is set and read zero otherwise. The kernel is
/// truncated at `ceil(3σ)`.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64, replicate: bool) -> Vec<f64> {
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let norm: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= norm);
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let off = t as isize - radius;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + off) } else { (y as isize + off, x as isize) };
                    let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                    let v = if inside {
                        src[yy as usize * w + xx as usize]
                    } else if replicate {
                        src[yy.clamp(0, h as isize - 1) as usize * w + xx.clamp(0, w as isize - 1) as usize]
                    } else {
                        0.0
                    };
                    acc += kv * v;
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let tmp = pass(plane, true);
    pass(&tmp, false)
}

/// A random authentic image.
pub fn synth_scene<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Result<RgbImage> {
    let plane = height * width;
    let mut planes = vec![0.0; 3 * plane];
    // Background: per-channel linear gradient.
    for c in 0..3 {
        let base = rng.random_range(0.2..0.8);
        let gy = rng.random_range(-0.3..0.3);
        let gx = rng.random_range(-0.3..0.3);
        for y in 0..height {
            for x in 0..width {
                planes[c * plane + y * width + x] = base + gy * (y as f64 / height as f64 - 0.5) + gx * (x as f64 / width as f64 - 0.5);
            }
        }
    }
    // Flat ellipses and rectangles.
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let color = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = rng.random_range(0.08..0.35) * height as f64;
        let rx = rng.random_range(0.08..0.35) * width as f64;
        let ellipse = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        planes[c * plane + y * width + x] = color[c];
                    }
                }
            }
        }
    }
    // Mild optical blur, then sensor noise with an image-specific level.
    let sigma = rng.random_range(0.6..1.4);
    for c in 0..3 {
        let blurred = gaussian_blur(&planes[c * plane..(c + 1) * plane], height, width, sigma, true);
        planes[c * plane..(c + 1) * plane].copy_from_slice(&blurred);
    }
    let noise = rng.random_range(0.005..0.03);
    for v in planes.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = (*v + noise * n).clamp(0.0, 1.0);
    }
    RgbImage::new(height, width, planes)
}
