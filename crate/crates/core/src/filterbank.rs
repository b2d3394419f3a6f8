//! Multi-feature forensic extractor: fixed SRM residuals, constrained Bayar
//! convolution, Sobel gradients and a small trainable noise-residual network,
//! concatenated into one `[K, H, W]` evidence map.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::image::{ForensicFeatureMap, RgbImage};
use crate::nn::Conv2d;
use crate::params::{uniform, ParamStore};
use crate::tensor::{conv2d, ConvGeom, PadMode, Tensor};

pub const SRM_CHANNELS: usize = 9;
pub const BAYAR_CHANNELS: usize = 3;
pub const SOBEL_CHANNELS: usize = 3;
pub const NOISE_CHANNELS: usize = 3;
/// Total channel count `K` of the concatenated feature map.
pub const FEATURE_CHANNELS: usize = SRM_CHANNELS + BAYAR_CHANNELS + SOBEL_CHANNELS + NOISE_CHANNELS;

/// Channels that do not depend on trainable parameters (SRM then Sobel).
pub const FIXED_CHANNELS: usize = SRM_CHANNELS + SOBEL_CHANNELS;

pub const BAYAR_KERNEL: usize = 5;
const BAYAR_CENTER: usize = 12;
const BAYAR_TAPS: usize = BAYAR_KERNEL * BAYAR_KERNEL;
/// Tolerance on the off-center sum accepted by [`apply_bayar`].
pub const BAYAR_SUM_TOLERANCE: f64 = 1e-6;

pub const BAYAR_PARAM: &str = "filters.bayar.weight";

/// The three 5×5 steganalysis residual kernels, each scaled so its largest
/// coefficient magnitude is 1: first-order horizontal difference,
/// second-order horizontal `[1, -2, 1]`, and the 5×5 "SQUARE" kernel.
pub fn srm_kernels() -> [[f64; 25]; 3] {
    #[rustfmt::skip]
    let first = [
        0., 0., 0., 0., 0.,
        0., 0., 0., 0., 0.,
        0., 0., -1., 1., 0.,
        0., 0., 0., 0., 0.,
        0., 0., 0., 0., 0.,
    ];
    #[rustfmt::skip]
    let second = [
        0., 0., 0., 0., 0.,
        0., 0., 0., 0., 0.,
        0., 1., -2., 1., 0.,
        0., 0., 0., 0., 0.,
        0., 0., 0., 0., 0.,
    ];
    #[rustfmt::skip]
    let square = [
        -1., 2., -2., 2., -1.,
        2., -6., 8., -6., 2.,
        -2., 8., -12., 8., -2.,
        2., -6., 8., -6., 2.,
        -1., 2., -2., 2., -1.,
    ];
    let norm = |k: [f64; 25]| {
        let m = k.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
        k.map(|v| v / m)
    };
    [norm(first), norm(second), norm(square)]
}

/// `[9, 3, 5, 5]` weights: output channel `3 * kernel + color` applies SRM
/// kernel `kernel` to color plane `color` only.
fn srm_weights() -> Tensor {
    let kernels = srm_kernels();
    let mut w = vec![0.0; SRM_CHANNELS * 3 * 25];
    for (k, kernel) in kernels.iter().enumerate() {
        for color in 0..3 {
            let oc = 3 * k + color;
            w[(oc * 3 + color) * 25..(oc * 3 + color + 1) * 25].copy_from_slice(kernel);
        }
    }
    Tensor::from_vec(&[SRM_CHANNELS, 3, 5, 5], w)
}

fn srm_tensor(image: &RgbImage) -> Tensor {
    conv2d(&image.to_tensor(), &srm_weights(), None, &ConvGeom::same(5, 1, PadMode::Reflect))
}

fn finite_pixels(image: &RgbImage) -> Result<()> {
    if image.planes().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("image contains non-finite pixels".into()));
    }
    Ok(())
}

/// SRM high-pass residuals (9 channels, reflect padding).
pub fn apply_srm(image: &RgbImage) -> Result<ForensicFeatureMap> {
    finite_pixels(image)?;
    ForensicFeatureMap::new(srm_tensor(image), vec![("srm".to_string(), SRM_CHANNELS)])
}

/// Luma-based Sobel responses: channels `[gx, gy, magnitude]`.
fn sobel_tensor(image: &RgbImage) -> Tensor {
    let (h, w) = (image.height(), image.width());
    let luma: Vec<f64> = (0..h * w)
        .map(|i| 0.299 * image.plane(0)[i] + 0.587 * image.plane(1)[i] + 0.114 * image.plane(2)[i])
        .collect();
    let luma = Tensor::from_vec(&[1, h, w], luma);
    #[rustfmt::skip]
    let kernels = Tensor::from_vec(&[2, 1, 3, 3], vec![
        -1., 0., 1., -2., 0., 2., -1., 0., 1.,
        -1., -2., -1., 0., 0., 0., 1., 2., 1.,
    ]);
    let g = conv2d(&luma, &kernels, None, &ConvGeom::same(3, 1, PadMode::Reflect));
    let mut out = g.into_data();
    let mag: Vec<f64> = (0..h * w).map(|i| libm::hypot(out[i], out[h * w + i])).collect();
    out.extend(mag);
    Tensor::from_vec(&[SOBEL_CHANNELS, h, w], out)
}

pub fn apply_sobel(image: &RgbImage) -> Result<ForensicFeatureMap> {
    finite_pixels(image)?;
    ForensicFeatureMap::new(sobel_tensor(image), vec![("sobel".to_string(), SOBEL_CHANNELS)])
}

/// The parameter-free channels `[SRM(9), Sobel(3)]` as one `[12, H, W]`
/// tensor. Training caches this per sample.
pub fn fixed_features(image: &RgbImage) -> Result<Tensor> {
    finite_pixels(image)?;
    let mut data = srm_tensor(image).into_data();
    data.extend(sobel_tensor(image).into_data());
    Ok(Tensor::from_vec(&[FIXED_CHANNELS, image.height(), image.width()], data))
}

/// Learnable constrained-convolution kernels, `[3 out, 3 in, 5, 5]`.
///
/// After projection every 5×5 slice has center tap −1 and off-center taps
/// summing to 1, so each slice is a prediction-error filter.
#[derive(Clone, Debug, PartialEq)]
pub struct BayarWeights {
    kernels: Tensor,
}

impl BayarWeights {
    pub fn new(kernels: Tensor) -> Result<Self> {
        if kernels.shape() != [BAYAR_CHANNELS, 3, BAYAR_KERNEL, BAYAR_KERNEL] {
            return Err(Error::InvalidInput(alloc::format!(
                "bayar kernels must be [3, 3, 5, 5], got {:?}",
                kernels.shape()
            )));
        }
        if !kernels.is_finite() {
            return Err(Error::InvalidInput("bayar kernels contain non-finite values".into()));
        }
        Ok(Self { kernels })
    }

    /// Unprojected random kernels with taps in `[0, 1]`.
    pub fn random(seed: u64) -> Self {
        let t = uniform(seed, BAYAR_PARAM, &[BAYAR_CHANNELS, 3, BAYAR_KERNEL, BAYAR_KERNEL], 1.0);
        Self { kernels: t.map(libm::fabs) }
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    /// Checks the constraint on every slice.
    pub fn check(&self) -> Result<()> {
        for (i, slice) in self.kernels.data().chunks(BAYAR_TAPS).enumerate() {
            let center = slice[BAYAR_CENTER];
            let sum: f64 = off_center(slice).sum();
            if center != -1.0 || libm::fabs(sum - 1.0) > BAYAR_SUM_TOLERANCE {
                return Err(Error::ConstraintViolation(alloc::format!(
                    "slice {i}: center {center}, off-center sum {sum}"
                )));
            }
        }
        Ok(())
    }
}

fn off_center(slice: &[f64]) -> impl Iterator<Item = f64> + '_ {
    slice.iter().enumerate().filter(|(i, _)| *i != BAYAR_CENTER).map(|(_, v)| *v)
}

/// Off-center sums this close to 1 count as already projected.
const PROJECTED_SUM_TOLERANCE: f64 = 1e-12;
/// Raw sums below this magnitude use the additive correction.
const ZERO_SUM: f64 = 1e-12;

/// Projects one 25-tap slice in place.
pub(crate) fn project_slice(slice: &mut [f64]) {
    let sum: f64 = off_center(slice).sum();
    if libm::fabs(sum - 1.0) <= PROJECTED_SUM_TOLERANCE {
        slice[BAYAR_CENTER] = -1.0;
        return;
    }
    for (i, v) in slice.iter_mut().enumerate() {
        if i == BAYAR_CENTER {
            *v = -1.0;
        } else if libm::fabs(sum) < ZERO_SUM {
            *v += (1.0 - sum) / (BAYAR_TAPS - 1) as f64;
        } else {
            *v /= sum;
        }
    }
}

/// Sets every center tap to −1 and rescales the off-center taps to sum to 1
/// (uniform additive correction when their raw sum is exactly zero).
pub fn project_bayar(weights: &BayarWeights) -> BayarWeights {
    let mut kernels = weights.kernels.clone();
    for slice in kernels.data_mut().chunks_mut(BAYAR_TAPS) {
        project_slice(slice);
    }
    BayarWeights { kernels }
}

/// Constrained cross-correlation (reflect padding), 3 output channels.
pub fn apply_bayar(weights: &BayarWeights, image: &RgbImage) -> Result<ForensicFeatureMap> {
    finite_pixels(image)?;
    weights.check()?;
    let out = conv2d(&image.to_tensor(), &weights.kernels, None, &ConvGeom::same(BAYAR_KERNEL, 1, PadMode::Reflect));
    ForensicFeatureMap::new(out, vec![("bayar".to_string(), BAYAR_CHANNELS)])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Hidden width of the noise-residual network.
    pub noise_width: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { noise_width: 8 }
    }
}

/// Four 3×3 reflect-padded convolutions (3 → w → w → w → 3) with GELU
/// between them; stands in for a pretrained camera-noise extractor.
#[derive(Clone, Debug)]
pub struct NoiseNet {
    layers: [Conv2d; 4],
}

impl NoiseNet {
    pub fn new(width: usize) -> Self {
        let conv = |i: usize, cin, cout| Conv2d::same(alloc::format!("filters.noise.{i}"), cin, cout, 3, PadMode::Reflect);
        Self { layers: [conv(0, 3, width), conv(1, width, width), conv(2, width, width), conv(3, width, NOISE_CHANNELS)] }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for l in &self.layers {
            l.init(store, seed);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let mut x = image;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i + 1 < self.layers.len() {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }

    /// Runs the network on `image` (3 output channels, same spatial size).
    pub fn apply(&self, store: &ParamStore, image: &RgbImage) -> Result<ForensicFeatureMap> {
        finite_pixels(image)?;
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let y = self.forward(&mut g, store, x)?;
        ForensicFeatureMap::new(g.value(y).clone(), vec![("noise".to_string(), NOISE_CHANNELS)])
    }
}

/// Owns the Bayar kernels and noise-network parameters and produces the
/// concatenated `[SRM(9), Bayar(3), Sobel(3), Noise(3)]` evidence map.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub config: FilterConfig,
    pub params: ParamStore,
    noise: NoiseNet,
}

impl FeatureExtractor {
    pub fn new(config: FilterConfig, seed: u64) -> Self {
        let noise = NoiseNet::new(config.noise_width);
        let mut params = ParamStore::new();
        noise.init(&mut params, seed);
        params.insert(BAYAR_PARAM, project_bayar(&BayarWeights::random(seed)).kernels);
        Self { config, params, noise }
    }

    pub fn layout() -> Vec<(String, usize)> {
        vec![
            ("srm".to_string(), SRM_CHANNELS),
            ("bayar".to_string(), BAYAR_CHANNELS),
            ("sobel".to_string(), SOBEL_CHANNELS),
            ("noise".to_string(), NOISE_CHANNELS),
        ]
    }

    pub fn bayar(&self) -> Result<BayarWeights> {
        let t = self.params.get(BAYAR_PARAM).ok_or_else(|| Error::Uninitialized(BAYAR_PARAM.to_string()))?;
        BayarWeights::new(t.clone())
    }

    /// Re-imposes the Bayar constraint; call after every optimizer step.
    pub fn project(&mut self) {
        if let Some(t) = self.params.get_mut(BAYAR_PARAM) {
            for slice in t.data_mut().chunks_mut(BAYAR_TAPS) {
                project_slice(slice);
            }
        }
    }

    pub fn noise_net(&self) -> &NoiseNet {
        &self.noise
    }

    /// Value-level extraction through the individual extractors.
    pub fn extract_features(&self, image: &RgbImage) -> Result<ForensicFeatureMap> {
        let parts = [
            apply_srm(image)?,
            apply_bayar(&self.bayar()?, image)?,
            apply_sobel(image)?,
            self.noise.apply(&self.params, image)?,
        ];
        let (h, w) = (image.height(), image.width());
        if let Some(p) = parts.iter().find(|p| p.height() != h || p.width() != w) {
            return Err(Error::Contract(alloc::format!(
                "extractor {:?} produced {}x{} for a {h}x{w} image",
                p.layout()[0].0,
                p.height(),
                p.width()
            )));
        }
        let mut data = Vec::with_capacity(FEATURE_CHANNELS * h * w);
        for p in parts {
            data.extend(p.into_values().into_data());
        }
        ForensicFeatureMap::new(Tensor::from_vec(&[FEATURE_CHANNELS, h, w], data), Self::layout())
    }

    /// Graph-level extraction. `fixed` is the output of [`fixed_features`]
    /// for the same image.
    pub fn forward(&self, g: &mut Graph, image: Var, fixed: &Tensor) -> Result<Var> {
        let shape = g.value(image).shape().to_vec();
        if fixed.shape() != [FIXED_CHANNELS, shape[1], shape[2]] {
            return Err(Error::Contract(alloc::format!(
                "fixed features {:?} do not match image {:?}",
                fixed.shape(),
                shape
            )));
        }
        let w = g.param(&self.params, BAYAR_PARAM)?;
        let bayar = g.conv2d(image, w, None, ConvGeom::same(BAYAR_KERNEL, 1, PadMode::Reflect));
        let noise = self.noise.forward(g, &self.params, image)?;
        let fixed = g.constant(fixed.clone());
        let srm = g.slice(fixed, Axis::First, 0, SRM_CHANNELS);
        let sobel = g.slice(fixed, Axis::First, SRM_CHANNELS, SOBEL_CHANNELS);
        Ok(g.concat(&[srm, bayar, sobel, noise], Axis::First))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_raw(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn srm_on_constant_image_is_zero() {
        let img = RgbImage::filled(16, 16, [0.3, 0.5, 0.9]).unwrap();
        let f = apply_srm(&img).unwrap();
        assert_eq!(f.channels(), 9);
        assert!(f.values().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn srm_impulse_response_is_flipped_kernel() {
        let (h, w) = (17, 17);
        let mut img = RgbImage::filled(h, w, [0.0; 3]).unwrap();
        for c in 0..3 {
            img.set(c, 8, 8, 1.0);
        }
        let f = apply_srm(&img).unwrap();
        for (k, kernel) in srm_kernels().iter().enumerate() {
            for color in 0..3 {
                let ch = 3 * k + color;
                for y in 0..h {
                    for x in 0..w {
                        let got = f.values().data()[(ch * h + y) * w + x];
                        let (dy, dx) = (8 + 2 - y as isize, 8 + 2 - x as isize);
                        let want = if (0..5).contains(&dy) && (0..5).contains(&dx) {
                            kernel[dy as usize * 5 + dx as usize]
                        } else {
                            0.0
                        };
                        assert_eq!(got, want, "channel {ch} at ({y},{x})");
                    }
                }
            }
        }
    }

    #[test]
    fn srm_rejects_non_finite_and_is_pure() {
        let mut img = random_image(3, 16, 16);
        let a = apply_srm(&img).unwrap();
        let b = apply_srm(&img).unwrap();
        assert_eq!(a, b);
        img.set(1, 2, 3, f64::NAN);
        assert!(matches!(apply_srm(&img), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn projection_of_all_ones() {
        let w = BayarWeights::new(Tensor::full(&[3, 3, 5, 5], 1.0)).unwrap();
        let p = project_bayar(&w);
        for slice in p.kernels().data().chunks(25) {
            assert_eq!(slice[12], -1.0);
            for (i, v) in slice.iter().enumerate() {
                if i != 12 {
                    assert!((v - 1.0 / 24.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn projection_zero_sum_uses_additive_correction() {
        let mut t = Tensor::zeros(&[3, 3, 5, 5]);
        t.data_mut()[0] = 0.5;
        t.data_mut()[1] = -0.5;
        let p = project_bayar(&BayarWeights::new(t).unwrap());
        p.check().unwrap();
        assert!((p.kernels().data()[0] - (0.5 + 1.0 / 24.0)).abs() < 1e-15);
    }

    #[test]
    fn projection_is_idempotent() {
        for seed in 0..100 {
            let signed = uniform(seed, "t", &[3, 3, 5, 5], 1.0);
            let once = project_bayar(&BayarWeights::new(signed).unwrap());
            let twice = project_bayar(&once);
            assert!(once.kernels().max_abs_diff(twice.kernels()) <= 1e-12);
            once.check().unwrap();
        }
    }

    #[test]
    fn bayar_requires_projection_and_cancels_constants() {
        let img = RgbImage::filled(16, 16, [0.2, 0.4, 0.6]).unwrap();
        let raw = BayarWeights::random(1);
        assert!(matches!(apply_bayar(&raw, &img), Err(Error::ConstraintViolation(_))));
        let f = apply_bayar(&project_bayar(&raw), &img).unwrap();
        assert_eq!(f.channels(), 3);
        assert!(f.values().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sobel_vertical_step() {
        let (h, w) = (16, 16);
        let mut planes = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in w / 2..w {
                    planes[(c * h + y) * w + x] = 1.0;
                }
            }
        }
        let img = RgbImage::new(h, w, planes).unwrap();
        let f = apply_sobel(&img).unwrap();
        let v = f.values().data();
        for y in 0..h {
            for x in 0..w {
                let gx = v[y * w + x];
                let gy = v[h * w + y * w + x];
                assert!(gy.abs() < 1e-12);
                if x == w / 2 - 1 || x == w / 2 {
                    assert!((gx - 4.0).abs() < 1e-12);
                } else {
                    assert!(gx.abs() < 1e-12);
                }
                assert!(v[2 * h * w + y * w + x] >= 0.0);
            }
        }
    }

    #[test]
    fn noise_net_shape_determinism_and_missing_params() {
        let fx = FeatureExtractor::new(FilterConfig::default(), 7);
        let img = random_image(5, 16, 20);
        let a = fx.noise_net().apply(&fx.params, &img).unwrap();
        assert_eq!((a.channels(), a.height(), a.width()), (3, 16, 20));
        assert_eq!(a, fx.noise_net().apply(&fx.params, &img).unwrap());
        let empty = ParamStore::new();
        assert!(matches!(fx.noise_net().apply(&empty, &img), Err(Error::Uninitialized(_))));
    }

    #[test]
    fn noise_net_parameter_gradients_match_finite_differences() {
        let fx = FeatureExtractor::new(FilterConfig { noise_width: 4 }, 11);
        let img = random_image(2, 8, 8);
        let net = fx.noise_net();
        let sum_output = |store: &ParamStore| {
            let mut g = Graph::new();
            let x = g.constant(img.to_tensor());
            let y = net.forward(&mut g, store, x).unwrap();
            let s = g.sum_all(y);
            (g, s)
        };
        let (g, s) = sum_output(&fx.params);
        let grads = g.backward(s).into_param_grads(&g);
        let h = 1e-5;
        for (name, grad) in &grads {
            for i in (0..grad.len()).step_by(7) {
                let mut plus = fx.params.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += h;
                let mut minus = fx.params.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= h;
                let (gp, sp) = sum_output(&plus);
                let (gm, sm) = sum_output(&minus);
                let fd = (gp.value(sp).item() - gm.value(sm).item()) / (2.0 * h);
                let a = grad.data()[i];
                let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-3 || (fd - a).abs() < 1e-8, "{name}[{i}]: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn extract_features_layout_and_slices() {
        let fx = FeatureExtractor::new(FilterConfig::default(), 3);
        let img = random_image(9, 16, 16);
        let f = fx.extract_features(&img).unwrap();
        assert_eq!(f.channels(), FEATURE_CHANNELS);
        assert_eq!(f.channels(), 18);
        assert_eq!(f.layout(), FeatureExtractor::layout().as_slice());
        assert_eq!(&f.channel_range(0, 9), apply_srm(&img).unwrap().values());

        let flat = RgbImage::filled(16, 16, [0.5, 0.5, 0.5]).unwrap();
        let f = fx.extract_features(&flat).unwrap();
        let fixed = f.channel_range(0, 15);
        assert!(fixed.data().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(&f.channel_range(15, 18), fx.noise_net().apply(&fx.params, &flat).unwrap().values());
    }

    #[test]
    fn graph_extraction_matches_value_extraction() {
        let fx = FeatureExtractor::new(FilterConfig::default(), 4);
        let img = random_image(1, 16, 24);
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor());
        let v = fx.forward(&mut g, x, &fixed_features(&img).unwrap()).unwrap();
        let f = fx.extract_features(&img).unwrap();
        assert!(g.value(v).max_abs_diff(f.values()) < 1e-12);
    }
}
