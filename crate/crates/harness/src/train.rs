//! Epoch loop with periodic validation and best-checkpoint selection.

use std::path::{Path, PathBuf};

use prx_core::model::{Model, PreparedImage, TrainSample, Trainer};
use prx_core::objectives::{LossBreakdown, MetricsAverages};
use prx_core::proposal::PromptText;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_samples, LoadedSample};
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, external_backend, external_proposal, pad_image, pad_mask, ExternalBackend, Pipeline};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: u64,
    pub score: f64,
    pub metrics: MetricsAverages,
}

/// Progress notifications for callers that want to log.
#[derive(Clone, Debug)]
pub enum TrainEvent<'a> {
    Step { epoch: usize, step: u64, loss: &'a LossBreakdown },
    Validated(&'a ValidationRecord),
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<ValidationRecord>,
    /// Mean batch loss per optimizer step.
    pub losses: Vec<LossBreakdown>,
}

fn prepare(samples: &[LoadedSample], external: Option<&ExternalBackend>, prompt: &PromptText) -> Result<Vec<TrainSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(TrainSample {
                id: s.id.clone(),
                input: PreparedImage::new(pad_image(&s.image))?,
                mask: pad_mask(&s.mask),
                label: s.label,
                proposal: external_proposal(external, prompt, &s.image, Some(&s.image_path))?,
            })
        })
        .collect()
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Trains on in-memory samples. `val` may be the same slice as `train`.
pub fn train_on(
    cfg: &RunConfig,
    train: &[LoadedSample],
    val: &[LoadedSample],
    mut observe: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training manifest is empty".into()));
    }
    let prompt = PromptText::new(cfg.proposal.prompt.clone())?;
    let external = external_backend(&cfg.proposal, cfg.model.d)?;
    let prepared = prepare(train, external.as_ref(), &prompt)?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.adamw(), cfg.toggles, cfg.loss)?;

    let mut history = Vec::new();
    let mut losses = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let budget = cfg.max_steps.unwrap_or(u64::MAX);
    'epochs: for epoch in 0..cfg.epochs {
        let order = epoch_order(prepared.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let loss = trainer.train_step(&batch)?;
            observe(TrainEvent::Step { epoch, step: trainer.optimizer.step, loss: &loss });
            losses.push(loss);
            if trainer.optimizer.step >= budget {
                break;
            }
        }
        let stop = trainer.optimizer.step >= budget;
        if (epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs || stop {
            let pipeline =
                Pipeline { model: &trainer.model, toggles: cfg.toggles, external: external.as_ref(), prompt: prompt.clone() };
            let report = evaluate(&pipeline, val, false)?;
            let record =
                ValidationRecord { epoch, step: trainer.optimizer.step, score: report.selection_score(), metrics: report.avg };
            observe(TrainEvent::Validated(&record));
            if best.as_ref().and_then(|b| b.score).is_none_or(|s| record.score > s) {
                best = Some(Checkpoint::from_model(&trainer.model, &trainer.optimizer, cfg, Some(record.score)));
            }
            history.push(record);
        }
        if stop {
            break 'epochs;
        }
    }
    let last = Checkpoint::from_model(&trainer.model, &trainer.optimizer, cfg, history.last().map(|r| r.score));
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, history, losses })
}

/// Output files written by [`run`].
pub struct RunArtifacts {
    pub best: PathBuf,
    pub last: PathBuf,
    pub history: PathBuf,
}

/// Loads the configured manifests, trains, and writes `best.ckpt`,
/// `last.ckpt` and `history.json` to the output directory.
pub fn run(cfg: &RunConfig, observe: impl FnMut(TrainEvent<'_>)) -> Result<(TrainOutcome, RunArtifacts)> {
    cfg.validate()?;
    let train = load_samples(&cfg.data.train_manifest)?;
    let val = match &cfg.data.val_manifest {
        Some(p) => load_samples(p)?,
        None => train.clone(),
    };
    let outcome = train_on(cfg, &train, &val, observe)?;
    let out = &cfg.data.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let artifacts = RunArtifacts { best: out.join("best.ckpt"), last: out.join("last.ckpt"), history: out.join("history.json") };
    outcome.best.save(&artifacts.best)?;
    outcome.last.save(&artifacts.last)?;
    write_json(&outcome.history, &artifacts.history)?;
    Ok((outcome, artifacts))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 3, 0);
        assert_eq!(a, epoch_order(10, 3, 0));
        assert_ne!(a, epoch_order(10, 3, 1));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }
}
