//! Run configuration, read from JSON.

use std::path::{Path, PathBuf};

use prx_core::model::{ModelConfig, Toggles};
use prx_core::objectives::LossWeights;
use prx_core::optim::AdamWConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = AdamWConfig::default();
        Self { lr: d.lr, beta1: d.beta1, beta2: d.beta2, eps: d.eps, weight_decay: d.weight_decay }
    }
}

/// Where proposal embeddings come from: the built-in trainable `toy`
/// backend, or an `external` command that prints them as JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub backend: String,
    /// Program and leading arguments for the external backend; the image
    /// path and the prompt are appended.
    pub command: Vec<String>,
    pub prompt: String,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            command: Vec::new(),
            prompt: "Is this image manipulated? Locate the edited region.".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    /// Falls back to the training manifest when absent.
    pub val_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub warmup_steps: u64,
    /// Validate every this many epochs (and after the last one).
    pub validate_every: usize,
    pub batch_size: usize,
    /// Stops training early after this many optimizer steps.
    pub max_steps: Option<u64>,
    pub toggles: Toggles,
    pub proposal: ProposalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 20,
            warmup_steps: 100,
            validate_every: 2,
            batch_size: 4,
            max_steps: None,
            toggles: Toggles::default(),
            proposal: ProposalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn positive(name: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive")))
    }
}

impl RunConfig {
    /// Reads a JSON config. Relative data paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        positive("model.d", m.d > 0)?;
        positive("model.d_conv", m.d_conv > 0)?;
        positive("model.c", m.c > 0)?;
        positive("model.heads", m.heads > 0)?;
        positive("model.decoder_heads", m.decoder_heads > 0)?;
        positive("model.patch", m.patch > 0)?;
        positive("model.noise_width", m.noise_width > 0)?;
        positive("model.proposal_width", m.proposal_width > 0)?;
        positive("epochs", self.epochs > 0)?;
        positive("validate_every", self.validate_every > 0)?;
        positive("batch_size", self.batch_size > 0)?;
        positive("max_steps", self.max_steps != Some(0))?;
        if !(self.loss.lambda_bce >= 0.0 && self.loss.lambda_dice >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.adamw().validate()?;
        match self.proposal.backend.as_str() {
            "toy" => {}
            "external" if !self.proposal.command.is_empty() => {}
            "external" => return Err(Error::Config("external proposal backend needs a command".into())),
            other => return Err(Error::Config(format!("unknown proposal backend {other:?}"))),
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        let o = self.optimizer;
        AdamWConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            warmup_steps: self.warmup_steps,
        }
    }
}

impl DataConfig {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_manifest);
        if let Some(v) = self.val_manifest.as_mut() {
            fix(v);
        }
        fix(&mut self.out_dir);
    }
}
