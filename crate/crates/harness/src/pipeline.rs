//! Running the model on images of any size, external proposal backends and
//! metric aggregation.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use prx_core::image::{Mask, RgbImage};
use prx_core::model::{Model, PreparedImage, Toggles};
use prx_core::objectives::{EvalRecord, MetricsReport};
use prx_core::params::ParamStore;
use prx_core::proposal::{check_dim, BackendDescriptor, PromptText, ProposalBackend, ProposalEmbeddings};
use prx_core::segmenter::ENCODER_STRIDE;
use serde::Deserialize;

use crate::config::ProposalConfig;
use crate::data::{write_rgb, LoadedSample};
use crate::error::{Error, Result};

/// Replicates the bottom row and right column until both sides are
/// multiples of the encoder stride.
pub fn pad_image(image: &RgbImage) -> RgbImage {
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (h.next_multiple_of(ENCODER_STRIDE), w.next_multiple_of(ENCODER_STRIDE));
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let mut planes = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        let src = image.plane(c);
        for y in 0..ph {
            let row = &src[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
            planes.extend((0..pw).map(|x| row[x.min(w - 1)]));
        }
    }
    RgbImage::from_raw(ph, pw, planes)
}

/// Zero-extends a mask to the padded image size.
pub fn pad_mask(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let (ph, pw) = (h.next_multiple_of(ENCODER_STRIDE), w.next_multiple_of(ENCODER_STRIDE));
    let mut out = Mask::empty(ph, pw);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, mask.get(y, x));
        }
    }
    out
}

/// Image-level logits and per-pixel probabilities at the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub logits: [f64; 2],
    pub probabilities: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl Detection {
    pub fn mask(&self) -> Mask {
        Mask::from_probabilities(self.height, self.width, &self.probabilities, prx_core::segmenter::MASK_THRESHOLD)
            .expect("probabilities match the stored dimensions")
    }
}

pub trait Detector {
    /// `path` is the file the image was read from, when there is one.
    fn detect(&self, image: &RgbImage, path: Option<&Path>) -> Result<Detection>;
}

/// A proposal model run as a subprocess: it receives the image path and the
/// prompt as its last two arguments and prints
/// `{"e_anl": [...], "e_seg": [...]}` on stdout.
#[derive(Clone, Debug)]
pub struct ExternalBackend {
    descriptor: BackendDescriptor,
    command: Vec<String>,
    empty: ParamStore,
}

#[derive(Deserialize)]
struct ExternalOutput {
    e_anl: Vec<f64>,
    e_seg: Vec<f64>,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

pub(crate) fn temp_path(ext: &str) -> PathBuf {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("prx-{}-{n}.{ext}", std::process::id()))
}

impl ExternalBackend {
    pub fn new(command: Vec<String>, d: usize) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("external proposal backend needs a command".into()));
        }
        Ok(Self { descriptor: BackendDescriptor { name: "external".into(), seed: 0, d }, command, empty: ParamStore::new() })
    }

    pub fn propose_file(&self, image: &Path, prompt: &PromptText) -> Result<ProposalEmbeddings> {
        let out = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(image)
            .arg(prompt.as_str())
            .output()
            .map_err(|e| Error::Core(prx_core::Error::Backend(format!("cannot run {}: {e}", self.command[0]))))?;
        if !out.status.success() {
            return Err(Error::Core(prx_core::Error::Backend(format!(
                "{} exited with {}: {}",
                self.command[0],
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ))));
        }
        let parsed: ExternalOutput = serde_json::from_slice(&out.stdout)
            .map_err(|e| Error::Core(prx_core::Error::Backend(format!("unreadable backend output: {e}"))))?;
        let e = ProposalEmbeddings::new(parsed.e_anl, parsed.e_seg, prompt.as_str())?;
        check_dim(&e, self.descriptor.d)?;
        Ok(e)
    }
}

impl ProposalBackend for ExternalBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate_proposal(&self, image: &RgbImage, prompt: &PromptText) -> prx_core::Result<ProposalEmbeddings> {
        let path = temp_path("png");
        let result = write_rgb(image, &path).and_then(|_| self.propose_file(&path, prompt));
        let _ = std::fs::remove_file(&path);
        result.map_err(|e| match e {
            Error::Core(c) => c,
            other => prx_core::Error::Backend(other.to_string()),
        })
    }

    fn parameters(&self) -> &ParamStore {
        &self.empty
    }
}

/// The external backend named by `cfg`, if any.
pub fn external_backend(cfg: &ProposalConfig, d: usize) -> Result<Option<ExternalBackend>> {
    match cfg.backend.as_str() {
        "toy" => Ok(None),
        "external" => ExternalBackend::new(cfg.command.clone(), d).map(Some),
        other => Err(Error::Config(format!("unknown proposal backend {other:?}"))),
    }
}

/// Proposal embeddings from the external backend, or `None` when the model's
/// own backend is used.
pub fn external_proposal(
    external: Option<&ExternalBackend>,
    prompt: &PromptText,
    image: &RgbImage,
    path: Option<&Path>,
) -> Result<Option<ProposalEmbeddings>> {
    match (external, path) {
        (None, _) => Ok(None),
        (Some(b), Some(p)) => b.propose_file(p, prompt).map(Some),
        (Some(b), None) => Ok(Some(b.generate_proposal(image, prompt)?)),
    }
}

/// A model with its run switches and proposal source.
pub struct Pipeline<'a> {
    pub model: &'a Model,
    pub toggles: Toggles,
    pub external: Option<&'a ExternalBackend>,
    pub prompt: PromptText,
}

impl Detector for Pipeline<'_> {
    fn detect(&self, image: &RgbImage, path: Option<&Path>) -> Result<Detection> {
        let (h, w) = (image.height(), image.width());
        let input = PreparedImage::new(pad_image(image))?;
        let proposal = external_proposal(self.external, &self.prompt, image, path)?;
        let pred = self.model.predict(&input, self.toggles, proposal.as_ref())?;
        let pw = input.image.width();
        let probs = pred.mask.probabilities.data();
        let probabilities = (0..h).flat_map(|y| probs[y * pw..y * pw + w].iter().copied()).collect();
        Ok(Detection { logits: pred.logits, probabilities, height: h, width: w })
    }
}

pub fn evaluate(detector: &dyn Detector, samples: &[LoadedSample], include_authentic_pixels: bool) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate: the manifest is empty".into()));
    }
    let records = samples
        .iter()
        .map(|s| {
            let d = detector.detect(&s.image, Some(&s.image_path))?;
            Ok(EvalRecord { id: s.id.clone(), label: s.label, gt: s.mask.clone(), logits: d.logits, probabilities: d.probabilities })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_records(&records, include_authentic_pixels)?)
}
