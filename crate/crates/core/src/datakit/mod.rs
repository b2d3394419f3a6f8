//! Synthetic manipulation data, self-blended augmentation, image
//! perturbations and manifest row types.

mod generators;
mod perturb;
mod scene;

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Label, Mask, RgbImage};

pub use generators::{self_blend, synth_copy_move, synth_inpaint, synth_splice, GeneratorConfig, COPY_MOVE_TRIES};
pub use perturb::{describe as describe_perturbation, perturb, Jpeg2000Codec, PerturbationKind, PerturbationSpec, MAX_SEVERITY};
pub use scene::{gaussian_blur, synth_scene};

/// Name of the generator that produced a sample and the seed it used.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(generator: impl Into<String>, seed: u64) -> Self {
        Self { generator: generator.into(), seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: Mask,
    pub label: Label,
    pub provenance: Provenance,
}

impl Sample {
    /// Authentic samples have empty masks; manipulated ones do not.
    pub fn validate(&self) -> Result<()> {
        if self.mask.height() != self.image.height() || self.mask.width() != self.image.width() {
            return Err(Error::InvalidInput(format!(
                "mask {}x{} does not match image {}x{}",
                self.mask.height(),
                self.mask.width(),
                self.image.height(),
                self.image.width()
            )));
        }
        match (self.label, self.mask.is_empty()) {
            (Label::Authentic, false) => Err(Error::InvalidInput("authentic sample with a non-empty mask".into())),
            (Label::Manipulated, true) => Err(Error::InvalidInput("manipulated sample with an empty mask".into())),
            _ => Ok(()),
        }
    }
}

/// Kinds of synthetic sample the dataset generator can emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Authentic,
    Splice,
    CopyMove,
    Inpaint,
    SelfBlend,
}

impl SynthKind {
    pub const MANIPULATIONS: [SynthKind; 4] = [SynthKind::Splice, SynthKind::CopyMove, SynthKind::Inpaint, SynthKind::SelfBlend];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Authentic => "authentic",
            SynthKind::Splice => "splice",
            SynthKind::CopyMove => "copymove",
            SynthKind::Inpaint => "inpaint",
            SynthKind::SelfBlend => "selfblend",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "authentic" => Ok(SynthKind::Authentic),
            "splice" => Ok(SynthKind::Splice),
            "copymove" | "copy-move" | "copy_move" => Ok(SynthKind::CopyMove),
            "inpaint" => Ok(SynthKind::Inpaint),
            "selfblend" | "self-blend" | "self_blend" => Ok(SynthKind::SelfBlend),
            other => Err(Error::Config(format!("unknown sample kind {other:?}"))),
        }
    }
}

/// Generates one sample of `kind` at `height × width` from `seed` alone.
///
/// Copy-move placement failures are retried with derived seeds; the
/// provenance records the seed that succeeded.
pub fn generate(kind: SynthKind, height: usize, width: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Sample> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut last = None;
    for attempt in 0..16u64 {
        let s = seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let host = synth_scene(height, width, &mut rng)?;
        let result = match kind {
            SynthKind::Authentic => Ok(Sample {
                mask: Mask::empty(height, width),
                image: host,
                label: Label::Authentic,
                provenance: Provenance::new(kind.name(), s),
            }),
            SynthKind::Splice => {
                let donor = synth_scene(height, width, &mut rng)?;
                synth_splice(&host, &donor, &mut rng, cfg)
            }
            SynthKind::CopyMove => synth_copy_move(&host, &mut rng, cfg),
            SynthKind::Inpaint => synth_inpaint(&host, &mut rng, cfg),
            SynthKind::SelfBlend => self_blend(&host, &mut rng, cfg),
        };
        match result {
            Ok(mut sample) => {
                sample.provenance.seed = s;
                return Ok(sample);
            }
            Err(e @ Error::GenerationFailure { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}
