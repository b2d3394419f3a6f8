//! Single-file checkpoints: a magic line, a JSON envelope with the format
//! version and a SHA-256 of the body, then a JSON metadata block followed by
//! every array as little-endian `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use prx_core::model::Model;
use prx_core::optim::{AdamW, AdamWConfig, Moments};
use prx_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";
const MAGIC: &str = "prx-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: AdamW,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// Validation selection score at save time.
    pub score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    version: String,
    sha256: String,
    meta_bytes: usize,
    data_bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    shape: Vec<usize>,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: RunConfig,
    step: u64,
    score: Option<f64>,
    optimizer_config: AdamWConfig,
    optimizer_step: u64,
    params: Vec<ArrayEntry>,
    /// Each entry owns two arrays in the data block: `m` then `v`.
    moments: Vec<MomentEntry>,
}

fn push(data: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        data.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let end = self.pos + 8 * n;
        let bytes = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| Error::Integrity(format!("array {name} runs past the end of the data block")))?;
        self.pos = end;
        let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        Ok(Tensor::from_vec(shape, values))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: &AdamW, config: &RunConfig, score: Option<f64>) -> Self {
        Self { config: config.clone(), params: model.parameters(), optimizer: optimizer.clone(), step: optimizer.step, score }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                push(&mut data, t);
                ArrayEntry { name: name.clone(), shape: t.shape().to_vec() }
            })
            .collect();
        let moments = self
            .optimizer
            .moments
            .iter()
            .map(|(name, m)| {
                push(&mut data, &m.m);
                push(&mut data, &m.v);
                MomentEntry { name: name.clone(), shape: m.m.shape().to_vec(), step: m.step }
            })
            .collect();
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            score: self.score,
            optimizer_config: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            params,
            moments,
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut hasher = Sha256::new();
        hasher.update(&meta);
        hasher.update(&data);
        let envelope = Envelope {
            version: FORMAT_VERSION.into(),
            sha256: hex(&hasher.finalize()),
            meta_bytes: meta.len(),
            data_bytes: data.len(),
        };
        let mut out = format!("{MAGIC}\n{}\n", serde_json::to_string(&envelope).expect("envelope serializes")).into_bytes();
        out.extend_from_slice(&meta);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(MAGIC.as_bytes()) {
            return Err(Error::Integrity("missing checkpoint header".into()));
        }
        let envelope: Envelope = lines
            .next()
            .and_then(|l| serde_json::from_slice(l).ok())
            .ok_or_else(|| Error::Integrity("unreadable checkpoint envelope".into()))?;
        if envelope.version != FORMAT_VERSION {
            return Err(Error::Migration { found: envelope.version, expected: FORMAT_VERSION.into() });
        }
        let body = lines.next().unwrap_or(&[]);
        let expected = envelope.meta_bytes + envelope.data_bytes;
        if body.len() != expected {
            return Err(Error::Integrity(format!("body has {} bytes, envelope declares {expected}", body.len())));
        }
        if hex(&Sha256::digest(body)) != envelope.sha256 {
            return Err(Error::Integrity("SHA-256 mismatch".into()));
        }
        let (meta, data) = body.split_at(envelope.meta_bytes);
        let meta: Meta = serde_json::from_slice(meta).map_err(|e| Error::Integrity(format!("metadata: {e}")))?;
        let mut r = Reader { data, pos: 0 };
        let mut params = BTreeMap::new();
        for a in &meta.params {
            params.insert(a.name.clone(), r.take(&a.name, &a.shape)?);
        }
        let mut moments = BTreeMap::new();
        for m in &meta.moments {
            let mv = Moments { m: r.take(&m.name, &m.shape)?, v: r.take(&m.name, &m.shape)?, step: m.step };
            moments.insert(m.name.clone(), mv);
        }
        if r.pos != data.len() {
            return Err(Error::Integrity("trailing bytes after the last array".into()));
        }
        let optimizer = AdamW { config: meta.optimizer_config, step: meta.optimizer_step, moments };
        Ok(Self { config: meta.config, params, optimizer, step: meta.step, score: meta.score })
    }

    /// Writes through a temporary sibling file so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Builds the configured model and loads the stored parameters into it.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), self.config.seed)?;
        model.load_parameters(&self.params).map_err(|e| match e {
            prx_core::Error::Contract(m) => Error::Incompatible(m),
            other => other.into(),
        })?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use prx_core::model::ModelConfig;

    fn tiny_config() -> RunConfig {
        RunConfig {
            model: ModelConfig { d: 8, d_conv: 4, c: 8, heads: 2, decoder_heads: 2, noise_width: 2, proposal_width: 4, ..Default::default() },
            ..Default::default()
        }
    }

    fn checkpoint() -> Checkpoint {
        let cfg = tiny_config();
        let model = Model::new(cfg.model.clone(), 1).unwrap();
        let mut opt = AdamW::new(cfg.adamw()).unwrap();
        opt.step = 3;
        let name = "segmenter.decoder.mask_bias".to_string();
        opt.moments.insert(name, Moments { m: Tensor::full(&[1], 0.5), v: Tensor::full(&[1], 0.25), step: 3 });
        Checkpoint::from_model(&model, &opt, &cfg, Some(0.75))
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = checkpoint();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn truncation_and_corruption_are_integrity_errors() {
        let bytes = checkpoint().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 40, 5] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn old_versions_need_migration() {
        let text = String::from_utf8_lossy(&checkpoint().to_bytes()).replacen("\"version\":\"1\"", "\"version\":\"0\"", 1);
        match Checkpoint::from_bytes(text.as_bytes()) {
            Err(Error::Migration { found, expected }) => assert_eq!((found.as_str(), expected.as_str()), ("0", "1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_the_array() {
        let mut ck = checkpoint();
        ck.params.insert("segmenter.decoder.mask_bias".into(), Tensor::zeros(&[2]));
        match ck.model() {
            Err(Error::Incompatible(m)) => assert!(m.contains("segmenter.decoder.mask_bias"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
