//! Stride-16 image encoder, forensic aligner, discrepancy amplification and a
//! prompt-conditioned two-way attention mask decoder.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::FEATURE_CHANNELS;
use crate::graph::{Axis, Graph, Var};
use crate::image::{ForensicFeatureMap, Mask, RgbImage};
use crate::nn::{Conv2d, ConvTranspose2d, LayerNorm, Linear, MultiHeadAttention, Padding};
use crate::params::ParamStore;
use crate::tensor::{sinusoidal_2d, PadMode, Tensor};

pub const ENCODER_STRIDE: usize = 16;
pub const MASK_THRESHOLD: f64 = 0.5;
pub const MASK_BIAS_PARAM: &str = "segmenter.decoder.mask_bias";

/// Parameter-name prefixes of the modules skipped when the enhancement path
/// is disabled.
pub const ENHANCEMENT_PREFIXES: [&str; 3] = ["segmenter.align.", "segmenter.disc.", "segmenter.amp."];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    /// Embedding channels `c`.
    pub c: usize,
    /// Width of the incoming segmentation prompt.
    pub d: usize,
    pub heads: usize,
    /// Forensic channels `K`.
    pub channels: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { c: 64, d: 256, heads: 8, channels: FEATURE_CHANNELS }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c < 4 || self.c % 4 != 0 {
            return Err(Error::Config(format!("embedding channels c = {} must be a positive multiple of 4", self.c)));
        }
        if self.heads == 0 || self.c % self.heads != 0 {
            return Err(Error::Config(format!("c = {} is not divisible by {} heads", self.c, self.heads)));
        }
        if self.d == 0 || self.channels == 0 {
            return Err(Error::Config("segmenter widths must be positive".into()));
        }
        Ok(())
    }
}

/// Gates of the amplification step.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscrepancyState {
    /// `[c, h, w]`.
    pub s: Tensor,
    /// Spatial gate `[1, h, w]`.
    pub s_p: Tensor,
    /// Channel gate, length `c`.
    pub s_c: Vec<f64>,
}

/// Per-pixel manipulation probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    /// `[H, W]`.
    pub probabilities: Tensor,
    pub threshold: f64,
}

impl MaskPrediction {
    pub fn new(probabilities: Tensor) -> Self {
        Self { probabilities, threshold: MASK_THRESHOLD }
    }

    pub fn height(&self) -> usize {
        self.probabilities.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.probabilities.shape()[1]
    }

    pub fn binarize(&self) -> Mask {
        Mask::from_probabilities(self.height(), self.width(), self.probabilities.data(), self.threshold)
            .expect("prediction shape is consistent")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmenterToggles {
    pub use_esm: bool,
}

impl Default for SegmenterToggles {
    fn default() -> Self {
        Self { use_esm: true }
    }
}

fn strided_stack(prefix: &str, input: usize, c: usize) -> [Conv2d; 4] {
    let dims = [(input, c / 4), (c / 4, c / 2), (c / 2, c), (c, c)];
    core::array::from_fn(|i| Conv2d {
        name: format!("{prefix}.{i}"),
        input: dims[i].0,
        output: dims[i].1,
        kernel: 3,
        stride: 2,
        dilation: 1,
        padding: Padding::Fixed(1, PadMode::Zero),
    })
}

fn run_stack(g: &mut Graph, store: &ParamStore, convs: &[Conv2d], mut x: Var) -> Result<Var> {
    for (i, conv) in convs.iter().enumerate() {
        x = conv.forward(g, store, x)?;
        if i + 1 < convs.len() {
            x = g.gelu(x);
        }
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub config: SegmenterConfig,
    pub params: ParamStore,
    encoder: [Conv2d; 4],
    aligner: [Conv2d; 4],
    align_proj: Conv2d,
    disc: Conv2d,
    amp_spatial: Conv2d,
    amp_mlp: [Linear; 2],
    prompt_proj: Linear,
    attn_prompt: MultiHeadAttention,
    norms: [LayerNorm; 3],
    mlp: [Linear; 2],
    attn_image: MultiHeadAttention,
    up: [ConvTranspose2d; 2],
    hyper: [Linear; 2],
}

impl Segmenter {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.c;
        let s = Self {
            encoder: strided_stack("segmenter.encoder", 3, c),
            aligner: strided_stack("segmenter.align", config.channels, c),
            align_proj: Conv2d::same("segmenter.align.proj", c, c, 1, PadMode::Zero),
            disc: Conv2d::same("segmenter.disc", 4 * c, c, 1, PadMode::Zero),
            amp_spatial: Conv2d::same("segmenter.amp.spatial", c, 1, 3, PadMode::Zero),
            amp_mlp: [Linear::new("segmenter.amp.mlp0", c, c / 4), Linear::new("segmenter.amp.mlp1", c / 4, c)],
            prompt_proj: Linear::new("segmenter.decoder.prompt", config.d, c),
            attn_prompt: MultiHeadAttention::new("segmenter.decoder.attn_prompt", c, config.heads),
            norms: core::array::from_fn(|i| LayerNorm::new(format!("segmenter.decoder.norm{i}"), c)),
            mlp: [Linear::new("segmenter.decoder.mlp0", c, 2 * c), Linear::new("segmenter.decoder.mlp1", 2 * c, c)],
            attn_image: MultiHeadAttention::new("segmenter.decoder.attn_image", c, config.heads),
            up: [
                ConvTranspose2d::new("segmenter.decoder.up0", c, c / 2, 4),
                ConvTranspose2d::new("segmenter.decoder.up1", c / 2, c / 4, 4),
            ],
            hyper: [Linear::new("segmenter.decoder.hyper0", c, c), Linear::new("segmenter.decoder.hyper1", c, c / 4)],
            params: ParamStore::new(),
            config,
        };
        let mut params = ParamStore::new();
        for conv in s.encoder.iter().chain(&s.aligner).chain([&s.align_proj, &s.disc, &s.amp_spatial]) {
            conv.init(&mut params, seed);
        }
        for l in s.amp_mlp.iter().chain(&s.mlp).chain(&s.hyper).chain([&s.prompt_proj]) {
            l.init(&mut params, seed);
        }
        s.attn_prompt.init(&mut params, seed);
        s.attn_image.init(&mut params, seed);
        for n in &s.norms {
            n.init(&mut params);
        }
        for u in &s.up {
            u.init(&mut params, seed);
        }
        params.insert(MASK_BIAS_PARAM, Tensor::zeros(&[1]));
        Ok(Self { params, ..s })
    }

    fn check_image_dims(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(Error::InvalidInput(format!(
                "image {h}x{w} is not a multiple of {ENCODER_STRIDE} on both sides"
            )));
        }
        Ok(())
    }

    /// `[3, H, W]` → `[c, H/16, W/16]`.
    pub fn encode_graph(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let s = g.value(image).shape();
        Self::check_image_dims(s[1], s[2])?;
        run_stack(g, &self.params, &self.encoder, image)
    }

    /// `[K, H, W]` → `[c, H/16, W/16]`.
    pub fn align_graph(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let x = run_stack(g, &self.params, &self.aligner, f)?;
        let x = g.gelu(x);
        self.align_proj.forward(g, &self.params, x)
    }

    /// The `[4c, h, w]` stack `[E, Ft, E - Ft, E ⊙ Ft]`.
    pub fn discrepancy_stack(g: &mut Graph, e: Var, ft: Var) -> Var {
        let diff = g.sub(e, ft);
        let prod = g.mul(e, ft);
        g.concat(&[e, ft, diff, prod], Axis::First)
    }

    pub fn discrepancy_graph(&self, g: &mut Graph, e: Var, ft: Var) -> Result<Var> {
        let (se, sf) = (g.value(e).shape(), g.value(ft).shape());
        if se != sf {
            return Err(Error::Contract(format!("embedding {se:?} and aligned forensics {sf:?} differ")));
        }
        let stack = Self::discrepancy_stack(g, e, ft);
        self.disc.forward(g, &self.params, stack)
    }

    /// Returns `(Ê, S_p [1, h, w], S_c [c, 1, 1])`.
    pub fn amplify_graph(&self, g: &mut Graph, e: Var, s: Var) -> Result<(Var, Var, Var)> {
        let shape = g.value(s).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let sp = self.amp_spatial.forward(g, &self.params, s)?;
        let sp = g.sigmoid(sp);
        let flat = g.reshape(s, &[c, h * w]);
        let gap = g.mean_last(flat);
        let gap = g.reshape(gap, &[1, c]);
        let hidden = self.amp_mlp[0].forward(g, &self.params, gap)?;
        let hidden = g.gelu(hidden);
        let sc = self.amp_mlp[1].forward(g, &self.params, hidden)?;
        let sc = g.sigmoid(sc);
        let sc = g.reshape(sc, &[c, 1, 1]);
        let gate_c = g.shift(sc, 1.0);
        let gate_p = g.shift(sp, 1.0);
        let out = g.mul(e, gate_c);
        let out = g.mul(out, gate_p);
        Ok((out, sp, sc))
    }

    /// Decodes `Ê: [c, h, w]` with prompt `[1, d]` into probabilities `[16h, 16w]`.
    pub fn decode_graph(&self, g: &mut Graph, e_hat: Var, prompt: Var) -> Result<Var> {
        let shape = g.value(e_hat).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if g.value(prompt).shape() != [1, self.config.d] {
            return Err(Error::Contract(format!(
                "prompt must be [1, {}], got {:?}",
                self.config.d,
                g.value(prompt).shape()
            )));
        }
        let p = &self.params;
        let flat = g.reshape(e_hat, &[c, h * w]);
        let img = g.transpose(flat);
        let pe = g.constant(sinusoidal_2d(h, w, c));
        let img = g.add(img, pe);
        let tok = self.prompt_proj.forward(g, p, prompt)?;

        let a = self.attn_prompt.forward(g, p, tok, img)?;
        let r = g.add(tok, a);
        let tok = self.norms[0].forward(g, p, r)?;
        let m = self.mlp[0].forward(g, p, tok)?;
        let m = g.gelu(m);
        let m = self.mlp[1].forward(g, p, m)?;
        let r = g.add(tok, m);
        let tok = self.norms[1].forward(g, p, r)?;
        let a = self.attn_image.forward(g, p, img, tok)?;
        let r = g.add(img, a);
        let img = self.norms[2].forward(g, p, r)?;

        let grid = g.transpose(img);
        let grid = g.reshape(grid, &[c, h, w]);
        let up = self.up[0].forward(g, p, grid)?;
        let up = g.gelu(up);
        let up = self.up[1].forward(g, p, up)?;
        let up = g.gelu(up);
        let (oh, ow) = (h * ENCODER_STRIDE, w * ENCODER_STRIDE);
        let up = g.reshape(up, &[c / 4, oh * ow]);

        let hyper = self.hyper[0].forward(g, p, tok)?;
        let hyper = g.gelu(hyper);
        let hyper = self.hyper[1].forward(g, p, hyper)?;
        let logits = g.matmul(hyper, up);
        let bias = g.param(p, MASK_BIAS_PARAM)?;
        let logits = g.add(logits, bias);
        let logits = g.reshape(logits, &[oh, ow]);
        Ok(g.sigmoid(logits))
    }

    /// Full chain: `image [3, H, W]`, `f [K, H, W]`, `prompt [1, d]` →
    /// probabilities `[H, W]`.
    pub fn forward(&self, g: &mut Graph, image: Var, f: Var, prompt: Var, toggles: SegmenterToggles) -> Result<Var> {
        let e = self.encode_graph(g, image)?;
        let e_hat = if toggles.use_esm {
            let (is, fs) = (g.value(image).shape(), g.value(f).shape());
            if fs.len() != 3 || fs[0] != self.config.channels || fs[1..] != is[1..] {
                return Err(Error::Contract(format!("features {fs:?} do not match image {is:?}")));
            }
            let ft = self.align_graph(g, f)?;
            let s = self.discrepancy_graph(g, e, ft)?;
            self.amplify_graph(g, e, s)?.0
        } else {
            e
        };
        self.decode_graph(g, e_hat, prompt)
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let e = self.encode_graph(&mut g, x)?;
        Ok(g.value(e).clone())
    }

    /// Aligns `f` to an embedding of shape `target = [c, h, w]`.
    pub fn align_forensics(&self, f: &ForensicFeatureMap, target: &[usize]) -> Result<Tensor> {
        let expected = [self.config.c, f.height() / ENCODER_STRIDE, f.width() / ENCODER_STRIDE];
        if f.channels() != self.config.channels
            || Self::check_image_dims(f.height(), f.width()).is_err()
            || target != expected
        {
            return Err(Error::Config(format!(
                "cannot align {}x{}x{} features to {target:?}",
                f.channels(),
                f.height(),
                f.width()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(f.values().clone());
        let y = self.align_graph(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn build_discrepancy(&self, e: &Tensor, ft: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(e.clone()), g.constant(ft.clone()));
        let s = self.discrepancy_graph(&mut g, a, b)?;
        Ok(g.value(s).clone())
    }

    pub fn amplify(&self, e: &Tensor, s: &Tensor) -> Result<(Tensor, DiscrepancyState)> {
        if e.shape() != s.shape() || e.rank() != 3 || e.shape()[0] != self.config.c {
            return Err(Error::Contract(format!("cannot amplify {:?} with {:?}", e.shape(), s.shape())));
        }
        let mut g = Graph::new();
        let (a, b) = (g.constant(e.clone()), g.constant(s.clone()));
        let (out, sp, sc) = self.amplify_graph(&mut g, a, b)?;
        let state = DiscrepancyState { s: s.clone(), s_p: g.value(sp).clone(), s_c: g.value(sc).data().to_vec() };
        Ok((g.value(out).clone(), state))
    }

    pub fn decode_mask(&self, e_hat: &Tensor, e_seg_hat: &[f64]) -> Result<MaskPrediction> {
        if e_hat.rank() != 3 || e_hat.shape()[0] != self.config.c {
            return Err(Error::Contract(format!("embedding must be [{}, h, w], got {:?}", self.config.c, e_hat.shape())));
        }
        let mut g = Graph::new();
        let e = g.constant(e_hat.clone());
        let p = g.constant(Tensor::from_vec(&[1, e_seg_hat.len()], e_seg_hat.to_vec()));
        let m = self.decode_graph(&mut g, e, p)?;
        Ok(MaskPrediction::new(g.value(m).clone()))
    }

    pub fn run_segmentation(
        &self,
        image: &RgbImage,
        f: &ForensicFeatureMap,
        e_seg_hat: &[f64],
        toggles: SegmenterToggles,
    ) -> Result<MaskPrediction> {
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let fv = g.constant(f.values().clone());
        let p = g.constant(Tensor::from_vec(&[1, e_seg_hat.len()], e_seg_hat.to_vec()));
        let m = self.forward(&mut g, x, fv, p, toggles)?;
        Ok(MaskPrediction::new(g.value(m).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::{FeatureExtractor, FilterConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> SegmenterConfig {
        SegmenterConfig { c: 8, d: 16, heads: 2, channels: 18 }
    }

    fn image(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_raw(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect())
    }

    fn random(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn set(store: &mut ParamStore, name: &str, v: f64) {
        store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = v);
    }

    #[test]
    fn encoder_stride_and_divisibility() {
        let s = Segmenter::new(small(), 1).unwrap();
        let e = s.encode_image(&image(1, 64, 64)).unwrap();
        assert_eq!(e.shape(), [8, 4, 4]);
        assert_eq!(e, s.encode_image(&image(1, 64, 64)).unwrap());
        assert!(matches!(s.encode_image(&image(1, 40, 64)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn aligner_shapes_and_zero_input() {
        let s = Segmenter::new(small(), 2).unwrap();
        let fx = FeatureExtractor::new(FilterConfig::default(), 0);
        let f = fx.extract_features(&image(2, 32, 48)).unwrap();
        assert_eq!(s.align_forensics(&f, &[8, 2, 3]).unwrap().shape(), [8, 2, 3]);
        assert!(matches!(s.align_forensics(&f, &[8, 4, 4]), Err(Error::Config(_))));

        // Zero input: each layer reduces to its bias pushed through the rest.
        let zero = ForensicFeatureMap::new(Tensor::zeros(&[18, 32, 32]), FeatureExtractor::layout()).unwrap();
        let got = s.align_forensics(&zero, &[8, 2, 2]).unwrap();
        let mut x = Tensor::zeros(&[18, 32, 32]);
        for (i, conv) in s.aligner.iter().enumerate() {
            let w = s.params.get(&conv.weight_name()).unwrap();
            let b = s.params.get(&conv.bias_name()).unwrap();
            x = crate::tensor::conv2d(&x, w, Some(b), &conv.geometry(x.shape()[1], x.shape()[2]));
            if i < 3 {
                x = x.map(crate::tensor::gelu);
            }
        }
        x = x.map(crate::tensor::gelu);
        let w = s.params.get("segmenter.align.proj.weight").unwrap();
        let b = s.params.get("segmenter.align.proj.bias").unwrap();
        let want = crate::tensor::conv2d(&x, w, Some(b), &crate::tensor::ConvGeom::same(1, 1, PadMode::Zero));
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn discrepancy_stack_matches_elementwise_oracle() {
        let (e, ft) = (random(1, &[8, 2, 2]), random(2, &[8, 2, 2]));
        let mut g = Graph::new();
        let (a, b) = (g.constant(e.clone()), g.constant(ft.clone()));
        let st = Segmenter::discrepancy_stack(&mut g, a, b);
        let v = g.value(st).data();
        let n = 32;
        for i in 0..n {
            let (x, y) = (e.data()[i], ft.data()[i]);
            assert_eq!([v[i], v[n + i], v[2 * n + i], v[3 * n + i]], [x, y, x - y, x * y]);
        }
        let same = Segmenter::discrepancy_stack(&mut g, a, a);
        assert!(g.value(same).data()[2 * n..3 * n].iter().all(|v| *v == 0.0));

        let s = Segmenter::new(small(), 3).unwrap();
        assert_eq!(s.build_discrepancy(&e, &ft).unwrap().shape(), [8, 2, 2]);
        assert!(matches!(s.build_discrepancy(&e, &random(3, &[8, 2, 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn amplification_limits() {
        let mut s = Segmenter::new(small(), 4).unwrap();
        let (e, sm) = (random(4, &[8, 4, 4]), random(5, &[8, 4, 4]));
        for (pre, factor) in [(-50.0, 1.0), (50.0, 4.0)] {
            for name in ["segmenter.amp.spatial.weight", "segmenter.amp.mlp1.weight"] {
                set(&mut s.params, name, 0.0);
            }
            for name in ["segmenter.amp.spatial.bias", "segmenter.amp.mlp1.bias"] {
                set(&mut s.params, name, pre);
            }
            let (out, state) = s.amplify(&e, &sm).unwrap();
            for (o, x) in out.data().iter().zip(e.data()) {
                assert!((o - factor * x).abs() <= 1e-6 * (factor * x).abs());
            }
            assert_eq!(state.s_c.len(), 8);
            assert_eq!(state.s_p.shape(), [1, 4, 4]);
        }
    }

    #[test]
    fn amplification_is_bounded_and_sign_preserving() {
        let s = Segmenter::new(small(), 5).unwrap();
        for seed in 0..20 {
            let (e, sm) = (random(seed, &[8, 4, 4]), random(seed + 100, &[8, 4, 4]));
            let (out, state) = s.amplify(&e, &sm).unwrap();
            assert!(state.s_c.iter().chain(state.s_p.data()).all(|v| *v > 0.0 && *v < 1.0));
            for (o, x) in out.data().iter().zip(e.data()) {
                assert!(o.abs() > x.abs() && o.abs() < 4.0 * x.abs());
                assert_eq!(o.signum(), x.signum());
            }
        }
    }

    #[test]
    fn decoder_range_bias_and_prompt_sensitivity() {
        let mut s = Segmenter::new(small(), 6).unwrap();
        let e = random(6, &[8, 2, 3]);
        let p1: Vec<f64> = random(7, &[16]).into_data();
        let p2: Vec<f64> = random(8, &[16]).into_data();
        let m1 = s.decode_mask(&e, &p1).unwrap();
        assert_eq!(m1.probabilities.shape(), [32, 48]);
        assert!(m1.probabilities.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(m1, s.decode_mask(&e, &p2).unwrap());

        set(&mut s.params, MASK_BIAS_PARAM, -50.0);
        assert!(s.decode_mask(&e, &p1).unwrap().binarize().is_empty());
    }

    #[test]
    fn threshold_only_affects_binarization() {
        let s = Segmenter::new(small(), 7).unwrap();
        let e = random(9, &[8, 2, 2]);
        let p: Vec<f64> = random(10, &[16]).into_data();
        let a = s.decode_mask(&e, &p).unwrap();
        let mut b = a.clone();
        b.threshold = 0.9;
        assert_eq!(a.probabilities, b.probabilities);
        assert!(b.binarize().count() <= a.binarize().count());
    }

    #[test]
    fn disabled_enhancement_never_binds_its_parameters() {
        let s = Segmenter::new(small(), 8).unwrap();
        let fx = FeatureExtractor::new(FilterConfig::default(), 1);
        for seed in 0..20 {
            let img = image(seed, 32, 32);
            let f = fx.extract_features(&img).unwrap();
            let p: Vec<f64> = random(seed, &[16]).into_data();
            for use_esm in [true, false] {
                let mut g = Graph::new();
                let x = g.constant(img.to_tensor());
                let fv = g.constant(f.values().clone());
                let pv = g.constant(Tensor::from_vec(&[1, 16], p.clone()));
                let m = s.forward(&mut g, x, fv, pv, SegmenterToggles { use_esm }).unwrap();
                assert!(g.value(m).data().iter().all(|v| (0.0..=1.0).contains(v)));
                let touched = g.bound_params().any(|n| ENHANCEMENT_PREFIXES.iter().any(|p| n.starts_with(p)));
                assert_eq!(touched, use_esm);
            }
        }
    }

    #[test]
    fn full_path_matches_manual_composition() {
        let s = Segmenter::new(small(), 9).unwrap();
        let fx = FeatureExtractor::new(FilterConfig::default(), 2);
        let img = image(3, 32, 32);
        let f = fx.extract_features(&img).unwrap();
        let p: Vec<f64> = random(11, &[16]).into_data();
        let full = s.run_segmentation(&img, &f, &p, SegmenterToggles::default()).unwrap();
        let e = s.encode_image(&img).unwrap();
        let ft = s.align_forensics(&f, e.shape()).unwrap();
        let sm = s.build_discrepancy(&e, &ft).unwrap();
        let (e_hat, _) = s.amplify(&e, &sm).unwrap();
        assert_eq!(full, s.decode_mask(&e_hat, &p).unwrap());
    }

    #[test]
    fn enhancement_chain_gradients_match_finite_differences() {
        let s = Segmenter::new(small(), 10).unwrap();
        let (e, ft) = (random(12, &[8, 4, 4]), random(13, &[8, 4, 4]));
        let run = |e: &Tensor, ft: &Tensor, store: Option<&ParamStore>| {
            let mut s2 = s.clone();
            if let Some(st) = store {
                s2.params = st.clone();
            }
            let mut g = Graph::new();
            let (a, b) = (g.variable(e.clone()), g.variable(ft.clone()));
            let d = s2.discrepancy_graph(&mut g, a, b).unwrap();
            let (out, _, _) = s2.amplify_graph(&mut g, a, d).unwrap();
            let sq = g.mul(out, out);
            let l = g.sum_all(sq);
            (g, a, l)
        };
        let (g, a, l) = run(&e, &ft, None);
        let grads = g.backward(l);
        let ge = grads.get(a).unwrap().clone();
        let pg = grads.into_param_grads(&g);
        let h = 1e-6;
        let check = |an: f64, fd: f64, what: &str| {
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-3 || (an - fd).abs() < 1e-8, "{what}: {an} vs {fd}");
        };
        for i in (0..e.len()).step_by(5) {
            let (mut ep, mut em) = (e.clone(), e.clone());
            ep.data_mut()[i] += h;
            em.data_mut()[i] -= h;
            let (gp, _, lp) = run(&ep, &ft, None);
            let (gm, _, lm) = run(&em, &ft, None);
            check(ge.data()[i], (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h), "E");
        }
        for (name, grad) in &pg {
            for i in (0..grad.len()).step_by(11) {
                let (mut sp, mut sm) = (s.params.clone(), s.params.clone());
                sp.get_mut(name).unwrap().data_mut()[i] += h;
                sm.get_mut(name).unwrap().data_mut()[i] -= h;
                let (gp, _, lp) = run(&e, &ft, Some(&sp));
                let (gm, _, lm) = run(&e, &ft, Some(&sm));
                check(grad.data()[i], (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h), name);
            }
        }
    }
}
