//! Image, mask and feature-map containers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest side accepted by [`RgbImage::new`].
pub const MIN_SIDE: usize = 16;

/// RGB image with values in `[0, 1]`, stored planar (`[3, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    planes: Vec<f64>,
}

impl RgbImage {
    /// Builds a validated image from planar data.
    pub fn new(height: usize, width: usize, planes: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        let img = Self::from_raw(height, width, planes);
        img.check_pixels()?;
        Ok(img)
    }

    /// Builds an image without range or size validation. Operations still
    /// reject non-finite pixels.
    pub fn from_raw(height: usize, width: usize, planes: Vec<f64>) -> Self {
        assert_eq!(planes.len(), 3 * height * width, "planar buffer length mismatch");
        Self { height, width, planes }
    }

    pub fn from_interleaved(height: usize, width: usize, rgb: &[f64]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::InvalidInput(format!("expected {} samples, got {}", 3 * height * width, rgb.len())));
        }
        let plane = height * width;
        let mut planes = alloc::vec![0.0; 3 * plane];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planes[c * plane + i] = px[c];
            }
        }
        Self::new(height, width, planes)
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let v: Vec<f64> = rgb.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_interleaved(height, width, &v)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let plane = height * width;
        let mut planes = Vec::with_capacity(3 * plane);
        for v in rgb {
            planes.extend(core::iter::repeat_n(v, plane));
        }
        Self::new(height, width, planes)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn planes(&self) -> &[f64] {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut [f64] {
        &mut self.planes
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.planes[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.planes[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.planes[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.planes[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(self.planes[c * plane + i]);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.to_interleaved().into_iter().map(|v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect()
    }

    /// `[3, H, W]` tensor view (copy).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[3, self.height, self.width], self.planes.clone())
    }

    /// Rejects non-finite or out-of-range pixels.
    pub fn check_pixels(&self) -> Result<()> {
        if let Some(v) = self.planes.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite pixel value {v}")));
        }
        if let Some(v) = self.planes.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.planes {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Binary manipulation mask (`true` = manipulated).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: alloc::vec![false; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidInput(format!("mask has {} cells, expected {}", bits.len(), height * width)));
        }
        Ok(Self { height, width, bits })
    }

    /// Thresholds probabilities: `p >= threshold` is manipulated.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f64], threshold: f64) -> Result<Self> {
        Self::from_bits(height, width, probs.iter().map(|&p| p >= threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `[H, W]` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Self {
        let mut out = Self::empty(self.height, self.width);
        let r = radius as isize;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < self.height && (xx as usize) < self.width {
                            out.set(yy as usize, xx as usize, true);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Image-level ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Authentic,
    Manipulated,
}

impl Label {
    /// Class index used by the detection head (0 = authentic, 1 = manipulated).
    pub fn index(self) -> usize {
        match self {
            Label::Authentic => 0,
            Label::Manipulated => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Authentic),
            1 => Ok(Label::Manipulated),
            _ => Err(Error::InvalidInput(format!("label index {i} outside {{0, 1}}"))),
        }
    }
}

/// `[K, H, W]` stack of forensic evidence channels with a record of which
/// extractor produced which channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ForensicFeatureMap {
    values: Tensor,
    layout: Vec<(String, usize)>,
}

impl ForensicFeatureMap {
    pub fn new(values: Tensor, layout: Vec<(String, usize)>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Contract(format!("feature map must be [K, H, W], got {:?}", values.shape())));
        }
        let k: usize = layout.iter().map(|(_, n)| n).sum();
        if k != values.shape()[0] {
            return Err(Error::Contract(format!("layout sums to {k} channels but map has {}", values.shape()[0])));
        }
        if !values.is_finite() {
            return Err(Error::InvalidInput("feature map contains non-finite values".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn layout(&self) -> &[(String, usize)] {
        &self.layout
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Channels `[start, end)` as a `[end-start, H, W]` tensor.
    pub fn channel_range(&self, start: usize, end: usize) -> Tensor {
        let plane = self.height() * self.width();
        Tensor::from_vec(
            &[end - start, self.height(), self.width()],
            self.values.data()[start * plane..end * plane].to_vec(),
        )
    }

    /// Row-major `H × W × K` ordering, as used by the feature-map dump format.
    pub fn to_hwk(&self) -> Vec<f64> {
        let (k, h, w) = (self.channels(), self.height(), self.width());
        let mut out = alloc::vec![0.0; k * h * w];
        for c in 0..k {
            for p in 0..h * w {
                out[p * k + c] = self.values.data()[c * h * w + p];
            }
        }
        out
    }
}
