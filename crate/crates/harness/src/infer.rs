//! Single-image inference and the binary output formats.

use std::io::Write;
use std::path::{Path, PathBuf};

use prx_core::image::{ForensicFeatureMap, Label};
use prx_core::objectives::{predicted_label, softmax2};
use serde::{Deserialize, Serialize};

use crate::data::{read_rgb, write_mask};
use crate::error::{Error, Result};
use crate::pipeline::{Detection, Detector};
use crate::train::write_json;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probabilities {
    pub authentic: f64,
    pub manipulated: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    pub probabilities: Probabilities,
}

impl Verdict {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let [authentic, manipulated] = softmax2(logits);
        Self { label: predicted_label(logits), probabilities: Probabilities { authentic, manipulated } }
    }
}

fn write_u32s(out: &mut Vec<u8>, values: &[usize]) -> Result<()> {
    for &v in values {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// `u32` LE height and width, then `H·W` row-major `f32` LE probabilities.
pub fn encode_probability_map(height: usize, width: usize, probabilities: &[f64]) -> Result<Vec<u8>> {
    if height.checked_mul(width) != Some(probabilities.len()) {
        return Err(Error::Data(format!("{} probabilities for a {height}x{width} map", probabilities.len())));
    }
    let mut out = Vec::with_capacity(8 + 4 * probabilities.len());
    write_u32s(&mut out, &[height, width])?;
    out.extend(probabilities.iter().flat_map(|&p| (p as f32).to_le_bytes()));
    Ok(out)
}

pub fn decode_probability_map(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let (dims, values) = decode(bytes, 2)?;
    Ok((dims[0], dims[1], values))
}

/// `u32` LE height, width and channel count, then `H·W·K` `f32` LE values
/// with the channel index varying fastest.
pub fn encode_feature_map(features: &ForensicFeatureMap) -> Result<Vec<u8>> {
    let hwk = features.to_hwk();
    let mut out = Vec::with_capacity(12 + 4 * hwk.len());
    write_u32s(&mut out, &[features.height(), features.width(), features.channels()])?;
    out.extend(hwk.iter().flat_map(|&v| (v as f32).to_le_bytes()));
    Ok(out)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let (dims, values) = decode(bytes, 3)?;
    Ok((dims[0], dims[1], dims[2], values))
}

fn decode(bytes: &[u8], ndims: usize) -> Result<(Vec<usize>, Vec<f32>)> {
    let header = bytes.get(..4 * ndims).ok_or_else(|| Error::Data("truncated header".into()))?;
    let dims: Vec<usize> =
        header.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize).collect();
    let body = &bytes[4 * ndims..];
    let n: usize = dims.iter().product();
    if body.len() != 4 * n {
        return Err(Error::Data(format!("expected {n} values, found {} bytes", body.len())));
    }
    Ok((dims, body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()))
}

#[derive(Serialize)]
struct FeatureLayout<'a> {
    height: usize,
    width: usize,
    channels: usize,
    order: &'static str,
    groups: Vec<LayoutGroup<'a>>,
}

#[derive(Serialize)]
struct LayoutGroup<'a> {
    name: &'a str,
    start: usize,
    count: usize,
}

/// Writes `stem.bin` and its `stem.json` layout sidecar.
pub fn dump_features(features: &ForensicFeatureMap, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    write_file(&bin, &encode_feature_map(features)?)?;
    let mut start = 0;
    let groups = features
        .layout()
        .iter()
        .map(|(name, count)| {
            let g = LayoutGroup { name, start, count: *count };
            start += count;
            g
        })
        .collect();
    let layout = FeatureLayout {
        height: features.height(),
        width: features.width(),
        channels: features.channels(),
        order: "hwk",
        groups,
    };
    write_json(&layout, &json)?;
    Ok((bin, json))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Files written by [`infer`].
#[derive(Clone, Debug)]
pub struct InferOutputs {
    pub verdict: Verdict,
    pub verdict_path: PathBuf,
    pub mask_path: PathBuf,
    pub probability_path: PathBuf,
}

/// Runs the detector on one image file and writes `verdict.json`,
/// `mask.png` and `probabilities.bin` into `out_dir`.
pub fn infer(detector: &dyn Detector, image_path: &Path, out_dir: &Path) -> Result<(Detection, InferOutputs)> {
    let image = read_rgb(image_path)?;
    let det = detector.detect(&image, Some(image_path))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let verdict = Verdict::from_logits(det.logits);
    let outputs = InferOutputs {
        verdict,
        verdict_path: out_dir.join("verdict.json"),
        mask_path: out_dir.join("mask.png"),
        probability_path: out_dir.join("probabilities.bin"),
    };
    write_json(&verdict, &outputs.verdict_path)?;
    write_mask(&det.mask(), &outputs.mask_path)?;
    write_file(&outputs.probability_path, &encode_probability_map(det.height, det.width, &det.probabilities)?)?;
    Ok((det, outputs))
}
