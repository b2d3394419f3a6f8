//! Forensics rectification: the analysis embedding gates the forensic feature
//! map per channel, then both proposal embeddings are refined by cross-attention
//! against forensic tokens at three successively larger receptive fields.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::FEATURE_CHANNELS;
use crate::graph::{Axis, Graph, Var};
use crate::image::ForensicFeatureMap;
use crate::nn::{Conv2d, LayerNorm, Linear, MultiHeadAttention, PatchEmbed, Padding};
use crate::params::ParamStore;
use crate::proposal::ProposalEmbeddings;
use crate::tensor::{sigmoid, PadMode, Tensor};

/// One refinement scale: convolution kernel, dilation and position `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub kernel_size: usize,
    pub dilation: usize,
    pub scale_index: usize,
}

impl ScaleConfig {
    pub const DEFAULTS: [ScaleConfig; 3] = [
        ScaleConfig { kernel_size: 3, dilation: 1, scale_index: 1 },
        ScaleConfig { kernel_size: 7, dilation: 1, scale_index: 2 },
        ScaleConfig { kernel_size: 9, dilation: 2, scale_index: 3 },
    ];

    /// Side of the square receptive field of one convolution.
    pub fn receptive_field(&self) -> usize {
        self.dilation * (self.kernel_size - 1) + 1
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.dilation == 0 || !(1..=3).contains(&self.scale_index) {
            return Err(Error::Config(format!("invalid scale {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectifierConfig {
    pub d: usize,
    pub d_conv: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub scales: [ScaleConfig; 3],
    /// Residual connection + layer norm around each embedding update.
    pub residual_norm: bool,
}

impl Default for RectifierConfig {
    fn default() -> Self {
        Self {
            d: 256,
            d_conv: 256,
            heads: 8,
            patch: 8,
            channels: FEATURE_CHANNELS,
            scales: ScaleConfig::DEFAULTS,
            residual_norm: true,
        }
    }
}

impl RectifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_conv == 0 || self.patch == 0 || self.channels == 0 {
            return Err(Error::Config("rectifier widths and patch size must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        for (i, s) in self.scales.iter().enumerate() {
            s.validate()?;
            if s.scale_index != i + 1 {
                return Err(Error::Config(format!("scale {} listed at position {}", s.scale_index, i + 1)));
            }
        }
        Ok(())
    }
}

/// Patch tokens `[N, d]` and the `(rows, cols)` grid they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

/// Pre-sigmoid channel gates, one `K`-vector per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingWeights {
    pub w: [Vec<f64>; 3],
}

/// Embeddings after `k` completed rectification scales.
#[derive(Clone, Debug, PartialEq)]
pub struct RectifierState {
    pub k: usize,
    pub e_anl: Vec<f64>,
    pub e_seg: Vec<f64>,
}

impl RectifierState {
    pub fn initial(e0: &ProposalEmbeddings) -> Self {
        Self { k: 0, e_anl: e0.e_anl.clone(), e_seg: e0.e_seg.clone() }
    }

    fn to_tensor(&self) -> Tensor {
        let mut data = self.e_anl.clone();
        data.extend_from_slice(&self.e_seg);
        Tensor::from_vec(&[2, self.e_anl.len()], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RectifierOutput {
    /// `(authentic, manipulated)` logits.
    pub logits: [f64; 2],
    pub e_seg_hat: Vec<f64>,
}

/// Ablation switches for the rectifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RectifierToggles {
    pub use_frm: bool,
    pub use_fg: bool,
}

impl Default for RectifierToggles {
    fn default() -> Self {
        Self { use_frm: true, use_fg: true }
    }
}

/// Graph handles for the rectifier outputs.
#[derive(Clone, Copy, Debug)]
pub struct RectifierVars {
    /// `[1, 2]`.
    pub logits: Var,
    /// `[1, d]`.
    pub e_seg_hat: Var,
}

#[derive(Clone, Debug)]
struct ScaleBranch {
    conv: Conv2d,
    embed: PatchEmbed,
    msa: MultiHeadAttention,
    mca: MultiHeadAttention,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Rectifier {
    pub config: RectifierConfig,
    pub params: ParamStore,
    gate_embed: PatchEmbed,
    gate_mca: MultiHeadAttention,
    phi: [Linear; 2],
    scales: [ScaleBranch; 3],
    head_c: Linear,
    head_s: [Linear; 2],
}

impl Rectifier {
    pub fn new(config: RectifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, k) = (config.d, config.channels);
        let scales = core::array::from_fn(|i| {
            let s = config.scales[i];
            let name = format!("rectifier.scale{}", s.scale_index);
            ScaleBranch {
                conv: Conv2d {
                    name: format!("{name}.conv"),
                    input: k,
                    output: config.d_conv,
                    kernel: s.kernel_size,
                    stride: 1,
                    dilation: s.dilation,
                    padding: Padding::Same(PadMode::Reflect),
                },
                embed: PatchEmbed::new(format!("{name}.embed"), config.d_conv, d, config.patch),
                msa: MultiHeadAttention::new(&format!("{name}.msa"), d, config.heads),
                mca: MultiHeadAttention::new(&format!("{name}.mca"), d, config.heads),
                norm: LayerNorm::new(format!("{name}.norm"), d),
            }
        });
        let mut r = Self {
            gate_embed: PatchEmbed::new("rectifier.gate.embed", k, d, config.patch),
            gate_mca: MultiHeadAttention::new("rectifier.gate.mca", d, config.heads),
            phi: [Linear::new("rectifier.gate.phi0", d, d), Linear::new("rectifier.gate.phi1", d, 3 * k)],
            scales,
            head_c: Linear::new("rectifier.head_c", d, 2),
            head_s: [Linear::new("rectifier.head_s0", d, d), Linear::new("rectifier.head_s1", d, d)],
            params: ParamStore::new(),
            config,
        };
        let p = &mut r.params;
        r.gate_embed.init(p, seed);
        r.gate_mca.init(p, seed);
        for l in r.phi.iter().chain([&r.head_c]).chain(&r.head_s) {
            l.init(p, seed);
        }
        for s in &r.scales {
            s.conv.init(p, seed);
            s.embed.init(p, seed);
            s.msa.init(p, seed);
            s.mca.init(p, seed);
            s.norm.init(p);
        }
        Ok(r)
    }

    /// Names of the parameters used only by channel gating.
    pub fn gating_param_prefix() -> &'static str {
        "rectifier.gate."
    }

    /// Names of the parameters used only by the multi-scale chain.
    pub fn scale_param_prefix() -> &'static str {
        "rectifier.scale"
    }

    fn check_features(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.config.channels {
            return Err(Error::Contract(format!(
                "expected [{}, H, W] features, got {shape:?}",
                self.config.channels
            )));
        }
        if self.config.patch > shape[1].min(shape[2]) {
            return Err(Error::Config(format!(
                "patch size {} exceeds feature map {}x{}",
                self.config.patch, shape[1], shape[2]
            )));
        }
        let reach = self.scales.iter().map(|s| s.conv.dilation * (s.conv.kernel - 1) / 2).max().unwrap_or(0);
        if reach >= shape[1].min(shape[2]) {
            return Err(Error::Config(format!("feature map {}x{} too small for reflect padding {reach}", shape[1], shape[2])));
        }
        Ok(())
    }

    fn check_embedding(&self, len: usize) -> Result<()> {
        if len != self.config.d {
            return Err(Error::Contract(format!("embedding has {len} entries, expected {}", self.config.d)));
        }
        Ok(())
    }

    /// Gating weights: `e_anl` (`[1, d]`) attends over patch tokens of `f`;
    /// result `[1, 3K]`.
    pub fn gates_graph(&self, g: &mut Graph, e_anl: Var, f: Var) -> Result<Var> {
        let (tokens, _) = self.gate_embed.forward(g, &self.params, f)?;
        let attended = self.gate_mca.forward(g, &self.params, e_anl, tokens)?;
        let h = self.phi[0].forward(g, &self.params, attended)?;
        let h = g.gelu(h);
        self.phi[1].forward(g, &self.params, h)
    }

    /// Multi-scale branch `k` (1-based): conv, GELU, patch embedding, then
    /// `T + MSA(T)`.
    pub fn refine_graph(&self, g: &mut Graph, fk: Var, k: usize) -> Result<Var> {
        let s = &self.scales[k - 1];
        let x = s.conv.forward(g, &self.params, fk)?;
        let x = g.gelu(x);
        let (t, _) = s.embed.forward(g, &self.params, x)?;
        let a = s.msa.forward(g, &self.params, t, t)?;
        Ok(g.add(t, a))
    }

    /// Updates the `[2, d]` embedding pair against scale-`k` tokens.
    pub fn rectify_graph(&self, g: &mut Graph, q: Var, tokens: Var, k: usize) -> Result<Var> {
        let s = &self.scales[k - 1];
        let a = s.mca.forward(g, &self.params, q, tokens)?;
        if !self.config.residual_norm {
            return Ok(a);
        }
        let r = g.add(q, a);
        s.norm.forward(g, &self.params, r)
    }

    /// Detection logits `[1, 2]` and segmentation prompt `[1, d]` from a
    /// `[2, d]` embedding pair.
    pub fn heads_graph(&self, g: &mut Graph, e: Var) -> Result<RectifierVars> {
        let anl = g.slice(e, Axis::First, 0, 1);
        let seg = g.slice(e, Axis::First, 1, 1);
        let logits = self.head_c.forward(g, &self.params, anl)?;
        let h = self.head_s[0].forward(g, &self.params, seg)?;
        let h = g.gelu(h);
        let e_seg_hat = self.head_s[1].forward(g, &self.params, h)?;
        Ok(RectifierVars { logits, e_seg_hat })
    }

    /// Full chain on graph values: `e0: [2, d]`, `f: [K, H, W]`.
    pub fn forward(&self, g: &mut Graph, e0: Var, f: Var, toggles: RectifierToggles) -> Result<RectifierVars> {
        self.check_features(g.value(f).shape())?;
        let e_shape = g.value(e0).shape();
        if e_shape != [2, self.config.d] {
            return Err(Error::Contract(format!("expected [2, {}] embeddings, got {e_shape:?}", self.config.d)));
        }
        if !toggles.use_frm {
            return self.heads_graph(g, e0);
        }
        let k = self.config.channels;
        let gates = if toggles.use_fg {
            let anl = g.slice(e0, Axis::First, 0, 1);
            let w = self.gates_graph(g, anl, f)?;
            Some(g.reshape(w, &[3 * k, 1, 1]))
        } else {
            None
        };
        let mut e = e0;
        for scale in 1..=3 {
            let fk = match gates {
                Some(w) => {
                    let wk = g.slice(w, Axis::First, (scale - 1) * k, k);
                    let s = g.sigmoid(wk);
                    g.mul(f, s)
                }
                None => f,
            };
            let tokens = self.refine_graph(g, fk, scale)?;
            e = self.rectify_graph(g, e, tokens, scale)?;
        }
        self.heads_graph(g, e)
    }

    pub fn patch_embed(&self, f: &ForensicFeatureMap) -> Result<PatchTokens> {
        self.check_features(f.values().shape())?;
        let mut g = Graph::new();
        let x = g.constant(f.values().clone());
        let (t, grid) = self.gate_embed.forward(&mut g, &self.params, x)?;
        Ok(PatchTokens { tokens: g.value(t).clone(), grid })
    }

    pub fn compute_gates(&self, e_anl0: &[f64], f: &ForensicFeatureMap) -> Result<GatingWeights> {
        self.check_embedding(e_anl0.len())?;
        self.check_features(f.values().shape())?;
        if e_anl0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("analysis embedding contains non-finite values".into()));
        }
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_vec(&[1, e_anl0.len()], e_anl0.to_vec()));
        let x = g.constant(f.values().clone());
        let w = self.gates_graph(&mut g, e, x)?;
        let k = self.config.channels;
        let data = g.value(w).data();
        Ok(GatingWeights { w: core::array::from_fn(|i| data[i * k..(i + 1) * k].to_vec()) })
    }

    /// Tokens of scale `cfg` for an already gated map.
    pub fn refine_scale(&self, fk: &ForensicFeatureMap, cfg: ScaleConfig) -> Result<Tensor> {
        cfg.validate()?;
        if self.config.scales[cfg.scale_index - 1] != cfg {
            return Err(Error::Config(format!("scale {cfg:?} is not configured")));
        }
        self.check_features(fk.values().shape())?;
        let mut g = Graph::new();
        let x = g.constant(fk.values().clone());
        let t = self.refine_graph(&mut g, x, cfg.scale_index)?;
        Ok(g.value(t).clone())
    }

    /// Output of the scale-`k` convolution alone, `[d_conv, H, W]`.
    pub fn scale_conv_response(&self, f: &Tensor, k: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let y = self.scales[k - 1].conv.forward(&mut g, &self.params, x)?;
        Ok(g.value(y).clone())
    }

    pub fn rectify_embeddings(&self, state: &RectifierState, tokens: &Tensor) -> Result<RectifierState> {
        if state.k >= 3 {
            return Err(Error::Sequencing { expected: state.k + 1, found: 4 });
        }
        self.check_embedding(state.e_anl.len())?;
        if tokens.rank() != 2 || tokens.shape()[1] != self.config.d {
            return Err(Error::Contract(format!("tokens must be [N, {}], got {:?}", self.config.d, tokens.shape())));
        }
        let mut g = Graph::new();
        let q = g.constant(state.to_tensor());
        let t = g.constant(tokens.clone());
        let e = self.rectify_graph(&mut g, q, t, state.k + 1)?;
        let v = g.value(e).data();
        let d = self.config.d;
        Ok(RectifierState { k: state.k + 1, e_anl: v[..d].to_vec(), e_seg: v[d..].to_vec() })
    }

    pub fn project_heads(&self, state: &RectifierState) -> Result<RectifierOutput> {
        if state.k != 3 {
            return Err(Error::Sequencing { expected: 3, found: state.k });
        }
        self.heads_value(state)
    }

    fn heads_value(&self, state: &RectifierState) -> Result<RectifierOutput> {
        self.check_embedding(state.e_anl.len())?;
        let mut g = Graph::new();
        let e = g.constant(state.to_tensor());
        let out = self.heads_graph(&mut g, e)?;
        Ok(Self::read_output(&g, out))
    }

    fn read_output(g: &Graph, out: RectifierVars) -> RectifierOutput {
        let l = g.value(out.logits).data();
        RectifierOutput { logits: [l[0], l[1]], e_seg_hat: g.value(out.e_seg_hat).data().to_vec() }
    }

    pub fn run_rectification(
        &self,
        e0: &ProposalEmbeddings,
        f: &ForensicFeatureMap,
        toggles: RectifierToggles,
    ) -> Result<RectifierOutput> {
        self.check_embedding(e0.dim())?;
        let mut g = Graph::new();
        let e = g.constant(e0.to_tensor());
        let x = g.constant(f.values().clone());
        let out = self.forward(&mut g, e, x, toggles)?;
        Ok(Self::read_output(&g, out))
    }
}

/// `σ(w[c]) · F[c]` for every channel `c`.
pub fn gate_features(f: &ForensicFeatureMap, w: &[f64]) -> Result<ForensicFeatureMap> {
    if w.len() != f.channels() {
        return Err(Error::Contract(format!("{} gates for {} channels", w.len(), f.channels())));
    }
    let plane = f.height() * f.width();
    let mut values = f.values().clone();
    for (c, chunk) in values.data_mut().chunks_mut(plane).enumerate() {
        let s = sigmoid(w[c]);
        for v in chunk {
            *v *= s;
        }
    }
    ForensicFeatureMap::new(values, f.layout().to_vec())
}
