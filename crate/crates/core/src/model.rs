//! The assembled detector: feature extraction, proposal, rectification and
//! segmentation, plus single-step training.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::{fixed_features, FeatureExtractor, FilterConfig, FEATURE_CHANNELS};
use crate::graph::Graph;
use crate::graph::Var;
use crate::image::{Label, Mask, RgbImage};
use crate::objectives::{sample_loss_graph, LossBreakdown, LossWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::proposal::{constant_proposal_params, ProposalEmbeddings, ToyBackend, ToyConfig, CONSTANT_PARAM};
use crate::rectifier::{Rectifier, RectifierConfig, RectifierToggles, ScaleConfig};
use crate::segmenter::{MaskPrediction, Segmenter, SegmenterConfig, SegmenterToggles};
use crate::tensor::Tensor;

/// Architecture of the whole pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Proposal embedding width.
    pub d: usize,
    /// Channels of the multi-scale convolutions.
    pub d_conv: usize,
    /// Image-embedding channels.
    pub c: usize,
    pub heads: usize,
    pub decoder_heads: usize,
    pub patch: usize,
    pub scales: [ScaleConfig; 3],
    pub residual_norm: bool,
    pub noise_width: usize,
    pub proposal_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            d_conv: 256,
            c: 64,
            heads: 8,
            decoder_heads: 8,
            patch: 8,
            scales: ScaleConfig::DEFAULTS,
            residual_norm: true,
            noise_width: 8,
            proposal_width: 32,
        }
    }
}

/// Ablation switches; all enabled is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub use_frm: bool,
    pub use_fg: bool,
    pub use_esm: bool,
    pub use_pg: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { use_frm: true, use_fg: true, use_esm: true, use_pg: true }
    }
}

/// An image with its parameter-free forensic channels precomputed.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub image: RgbImage,
    pub fixed: Tensor,
}

impl PreparedImage {
    pub fn new(image: RgbImage) -> Result<Self> {
        let fixed = fixed_features(&image)?;
        Ok(Self { image, fixed })
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub input: PreparedImage,
    pub mask: Mask,
    pub label: Label,
    /// Embeddings from an external backend; the toy backend runs when `None`.
    pub proposal: Option<ProposalEmbeddings>,
}

/// Model output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub mask: MaskPrediction,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[1, 2]`.
    pub logits: Var,
    /// `[H, W]`.
    pub probabilities: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub filters: FeatureExtractor,
    pub proposal: ToyBackend,
    pub rectifier: Rectifier,
    pub segmenter: Segmenter,
    /// Learned constant proposal used when proposal guidance is off.
    pub pg: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.d % config.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by {} heads", config.d, config.heads)));
        }
        let filters = FeatureExtractor::new(FilterConfig { noise_width: config.noise_width }, seed);
        let proposal = ToyBackend::new(ToyConfig { d: config.d, width: config.proposal_width, heads: config.heads }, seed);
        let rectifier = Rectifier::new(
            RectifierConfig {
                d: config.d,
                d_conv: config.d_conv,
                heads: config.heads,
                patch: config.patch,
                channels: FEATURE_CHANNELS,
                scales: config.scales,
                residual_norm: config.residual_norm,
            },
            seed,
        )?;
        let segmenter = Segmenter::new(
            SegmenterConfig { c: config.c, d: config.d, heads: config.decoder_heads, channels: FEATURE_CHANNELS },
            seed,
        )?;
        let pg = constant_proposal_params(config.d, seed);
        Ok(Self { config, filters, proposal, rectifier, segmenter, pg })
    }

    pub fn stores(&self) -> [&ParamStore; 5] {
        [&self.filters.params, &self.proposal.params, &self.rectifier.params, &self.segmenter.params, &self.pg]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 5] {
        [
            &mut self.filters.params,
            &mut self.proposal.params,
            &mut self.rectifier.params,
            &mut self.segmenter.params,
            &mut self.pg,
        ]
    }

    /// All parameters under their global names.
    pub fn parameters(&self) -> BTreeMap<String, Tensor> {
        self.stores().iter().flat_map(|s| s.iter().map(|(k, v)| (k.into(), v.clone()))).collect()
    }

    /// Replaces parameters by name; every name must exist with the same shape.
    pub fn load_parameters(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut seen = 0;
        for store in self.stores_mut() {
            for (name, p) in store.iter_mut() {
                let v = values.get(name).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
                if v.shape() != p.shape() {
                    return Err(Error::Contract(format!(
                        "parameter {name} has shape {:?}, model expects {:?}",
                        v.shape(),
                        p.shape()
                    )));
                }
                *p = v.clone();
                seen += 1;
            }
        }
        if let Some(extra) = values.keys().find(|k| !self.stores().iter().any(|s| s.contains(k))) {
            return Err(Error::Contract(format!("unexpected parameter {extra}")));
        }
        debug_assert_eq!(seen, values.len());
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        input: &PreparedImage,
        toggles: Toggles,
        proposal: Option<&ProposalEmbeddings>,
    ) -> Result<ForwardVars> {
        let image = g.constant(input.image.to_tensor());
        let features = self.filters.forward(g, image, &input.fixed)?;
        let e0 = if !toggles.use_pg {
            g.param(&self.pg, CONSTANT_PARAM)?
        } else if let Some(e) = proposal {
            crate::proposal::check_dim(e, self.config.d)?;
            g.constant(e.to_tensor())
        } else {
            self.proposal.forward(g, image)?
        };
        let rt = RectifierToggles { use_frm: toggles.use_frm, use_fg: toggles.use_fg };
        let r = self.rectifier.forward(g, e0, features, rt)?;
        let st = SegmenterToggles { use_esm: toggles.use_esm };
        let probabilities = self.segmenter.forward(g, image, features, r.e_seg_hat, st)?;
        Ok(ForwardVars { logits: r.logits, probabilities })
    }

    pub fn predict(
        &self,
        input: &PreparedImage,
        toggles: Toggles,
        proposal: Option<&ProposalEmbeddings>,
    ) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, toggles, proposal)?;
        let l = g.value(out.logits).data();
        Ok(Prediction { logits: [l[0], l[1]], mask: MaskPrediction::new(g.value(out.probabilities).clone()) })
    }

    /// Composite loss of one sample and the gradient of its total with
    /// respect to every parameter the forward pass used.
    pub fn loss_and_grads(
        &self,
        sample: &TrainSample,
        toggles: Toggles,
        weights: LossWeights,
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, &sample.input, toggles, sample.proposal.as_ref())?;
        let loss = sample_loss_graph(&mut g, out.logits, out.probabilities, &sample.mask, sample.label, weights)?;
        let breakdown = loss.breakdown(&g);
        let grads = g.backward(loss.total).into_param_grads(&g);
        Ok((breakdown, grads))
    }
}

/// Model, optimizer and run switches for gradient-based training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub toggles: Toggles,
    pub weights: LossWeights,
}

impl Trainer {
    pub fn new(model: Model, optimizer: AdamWConfig, toggles: Toggles, weights: LossWeights) -> Result<Self> {
        Ok(Self { model, optimizer: AdamW::new(optimizer)?, toggles, weights })
    }

    /// One optimizer step on the mean loss of `batch`, followed by the Bayar
    /// projection. Returns the mean loss breakdown.
    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let step = self.optimizer.step + 1;
        let scale = 1.0 / batch.len() as f64;
        let mut mean = LossBreakdown::default();
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        for sample in batch {
            let (l, grads) = self.model.loss_and_grads(sample, self.toggles, self.weights)?;
            if !l.total.is_finite() {
                return Err(Error::Divergence { step });
            }
            mean.det += l.det * scale;
            mean.bce += l.bce * scale;
            mean.dice += l.dice * scale;
            mean.total += l.total * scale;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(a) => a.add_scaled(&g, scale),
                    None => {
                        acc.insert(name, g.map(|v| v * scale));
                    }
                }
            }
        }
        if acc.values().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step });
        }
        let mut stores = self.model.stores_mut();
        let mut refs: Vec<&mut ParamStore> = stores.iter_mut().map(|s| &mut **s).collect();
        self.optimizer.step(&mut refs, &acc)?;
        self.model.filters.project();
        Ok(mean)
    }
}
