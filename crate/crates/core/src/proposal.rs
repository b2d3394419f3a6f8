//! Proposal embeddings `(e_anl, e_seg)` from a pluggable backend, plus a small
//! trainable convolution + cross-attention backend.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::RgbImage;
use crate::nn::{Conv2d, MultiHeadAttention, Padding};
use crate::params::{uniform, ParamStore};
use crate::tensor::{sinusoidal_2d, PadMode, Tensor};

pub const DEFAULT_DIM: usize = 256;
pub const MAX_PROMPT_CHARS: usize = 4096;
pub const QUERIES_PARAM: &str = "proposal.queries";

/// Instruction text handed to the backend. May be empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText(String);

impl PromptText {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let n = text.chars().count();
        if n > MAX_PROMPT_CHARS {
            return Err(Error::InvalidInput(format!("prompt has {n} characters, limit is {MAX_PROMPT_CHARS}")));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Hidden states at the analysis and segmentation token positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalEmbeddings {
    pub e_anl: Vec<f64>,
    pub e_seg: Vec<f64>,
    /// Prompt the embeddings were generated from.
    pub prompt: String,
}

impl ProposalEmbeddings {
    pub fn new(e_anl: Vec<f64>, e_seg: Vec<f64>, prompt: impl Into<String>) -> Result<Self> {
        if e_anl.len() != e_seg.len() || e_anl.is_empty() {
            return Err(Error::Contract(format!(
                "proposal embeddings have lengths {} and {}",
                e_anl.len(),
                e_seg.len()
            )));
        }
        if e_anl.iter().chain(&e_seg).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("proposal embeddings contain non-finite values".into()));
        }
        Ok(Self { e_anl, e_seg, prompt: prompt.into() })
    }

    pub fn dim(&self) -> usize {
        self.e_anl.len()
    }

    /// `[2, d]` tensor with rows `(e_anl, e_seg)`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.e_anl.clone();
        data.extend_from_slice(&self.e_seg);
        Tensor::from_vec(&[2, self.dim()], data)
    }

    pub(crate) fn from_rows(t: &Tensor, prompt: &str) -> Result<Self> {
        let d = t.shape()[1];
        Self::new(t.data()[..d].to_vec(), t.data()[d..].to_vec(), prompt)
    }
}

/// Backend selection as written in run configurations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub seed: u64,
    pub d: usize,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        Self { name: "toy".into(), seed: 0, d: DEFAULT_DIM }
    }
}

pub trait ProposalBackend {
    fn descriptor(&self) -> &BackendDescriptor;

    fn generate_proposal(&self, image: &RgbImage, prompt: &PromptText) -> Result<ProposalEmbeddings>;

    /// Trainable parameters; empty for frozen backends.
    fn parameters(&self) -> &ParamStore;
}

/// Architecture knobs of [`ToyBackend`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub d: usize,
    /// Channels of the first three encoder blocks.
    pub width: usize,
    pub heads: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { d: DEFAULT_DIM, width: 32, heads: 8 }
    }
}

/// Four stride-2 convolution blocks produce a token grid; two learned
/// queries, one per special token, cross-attend over it. The prompt is
/// recorded but does not condition the output.
#[derive(Clone, Debug)]
pub struct ToyBackend {
    descriptor: BackendDescriptor,
    pub config: ToyConfig,
    pub params: ParamStore,
    encoder: [Conv2d; 4],
    attention: MultiHeadAttention,
}

impl ToyBackend {
    pub fn new(config: ToyConfig, seed: u64) -> Self {
        let w = config.width;
        let dims = [(3, w), (w, w), (w, w), (w, config.d)];
        let encoder = core::array::from_fn(|i| Conv2d {
            name: format!("proposal.encoder.{i}"),
            input: dims[i].0,
            output: dims[i].1,
            kernel: 3,
            stride: 2,
            dilation: 1,
            padding: Padding::Fixed(1, PadMode::Zero),
        });
        let attention = MultiHeadAttention::new("proposal.attn", config.d, config.heads);
        let mut params = ParamStore::new();
        for c in &encoder {
            c.init(&mut params, seed);
        }
        attention.init(&mut params, seed);
        params.insert(QUERIES_PARAM, uniform(seed, QUERIES_PARAM, &[2, config.d], 1.0));
        let descriptor = BackendDescriptor { name: "toy".into(), seed, d: config.d };
        Self { descriptor, config, params, encoder, attention }
    }

    /// `image: [3, H, W]` → `[2, d]` rows `(e_anl, e_seg)`.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let mut x = image;
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(g, &self.params, x)?;
            if i + 1 < self.encoder.len() {
                x = g.gelu(x);
            }
        }
        let s = g.value(x).shape().to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]]);
        let tokens = g.transpose(flat);
        let pe = g.constant(sinusoidal_2d(s[1], s[2], self.config.d));
        let tokens = g.add(tokens, pe);
        let queries = g.param(&self.params, QUERIES_PARAM)?;
        let attended = self.attention.forward(g, &self.params, queries, tokens)?;
        Ok(g.add(queries, attended))
    }
}

impl ProposalBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate_proposal(&self, image: &RgbImage, prompt: &PromptText) -> Result<ProposalEmbeddings> {
        if image.planes().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let e = self.forward(&mut g, x)?;
        let out = ProposalEmbeddings::from_rows(g.value(e), prompt.as_str())?;
        check_dim(&out, self.descriptor.d)?;
        Ok(out)
    }

    fn parameters(&self) -> &ParamStore {
        &self.params
    }
}

/// Rejects embeddings whose width differs from the configured `d`.
pub fn check_dim(e: &ProposalEmbeddings, d: usize) -> Result<()> {
    if e.dim() != d {
        return Err(Error::Contract(format!("backend returned {}-dim embeddings, expected {d}", e.dim())));
    }
    Ok(())
}

pub fn generate_proposal(
    backend: &dyn ProposalBackend,
    image: &RgbImage,
    prompt: &PromptText,
) -> Result<ProposalEmbeddings> {
    let e = backend.generate_proposal(image, prompt)?;
    check_dim(&e, backend.descriptor().d)?;
    Ok(e)
}

/// Builds a backend from the in-crate registry (`"toy"` only).
pub fn load_backend(descriptor: &BackendDescriptor) -> Result<Box<dyn ProposalBackend>> {
    match descriptor.name.as_str() {
        "toy" => {
            let config = ToyConfig { d: descriptor.d, ..ToyConfig::default() };
            if descriptor.d % config.heads != 0 {
                return Err(Error::Config(format!("d = {} is not divisible by {} heads", descriptor.d, config.heads)));
            }
            Ok(Box::new(ToyBackend::new(config, descriptor.seed)))
        }
        other => Err(Error::Config(format!("unknown proposal backend {:?}", other.to_string()))),
    }
}

/// Learned `[2, d]` constants that replace the backend when proposal
/// guidance is disabled.
pub fn constant_proposal_params(d: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert(CONSTANT_PARAM, uniform(seed, CONSTANT_PARAM, &[2, d], 1.0));
    store
}

pub const CONSTANT_PARAM: &str = "pg.embeddings";
