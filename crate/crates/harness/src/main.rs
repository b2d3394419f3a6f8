use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use prx_core::datakit::{PerturbationKind, SynthKind};
use prx_core::proposal::PromptText;
use prx::checkpoint::Checkpoint;
use prx::codec::available_codec;
use prx::config::RunConfig;
use prx::data::{load_samples, synthesize};
use prx::error::Error;
use prx::infer::{dump_features, infer};
use prx::pipeline::{evaluate, external_backend, pad_image, Pipeline};
use prx::sweep::{sweep, unsupported_kinds, write_outputs};
use prx::train::{self, TrainEvent};

#[derive(Parser)]
#[command(name = "prx", version, about = "Image forgery detection and localization")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Only print validation results.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a manifest and print the metrics JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also average pixel metrics over authentic samples.
        #[arg(long)]
        include_authentic_pixels: bool,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one image and write the verdict, mask and probability map.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the forensic feature map.
        #[arg(long)]
        dump_features: bool,
    },
    /// Pixel AUC under perturbations of increasing severity.
    PerturbSweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated kinds, or "all".
        #[arg(long, default_value = "all")]
        kinds: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        severities: Vec<u8>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate synthetic samples and append them to OUT/manifest.jsonl.
    Synth {
        /// splice, copymove, inpaint, selfblend, authentic, or mixed.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn with_pipeline<T>(ck: &Checkpoint, f: impl FnOnce(&Pipeline<'_>) -> anyhow::Result<T>) -> anyhow::Result<T> {
    let model = ck.model()?;
    let external = external_backend(&ck.config.proposal, ck.config.model.d)?;
    let prompt = PromptText::new(ck.config.proposal.prompt.clone()).map_err(Error::from)?;
    let pipeline = Pipeline { model: &model, toggles: ck.config.toggles, external: external.as_ref(), prompt };
    f(&pipeline)
}

fn parse_kinds(spec: &str) -> anyhow::Result<Vec<PerturbationKind>> {
    if spec == "all" {
        return Ok(PerturbationKind::ALL.to_vec());
    }
    let mut kinds = Vec::new();
    let mut unknown = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match PerturbationKind::parse(name) {
            Ok(k) => kinds.push(k),
            Err(_) => unknown.push(name.to_string()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Unsupported(unknown).into());
    }
    if kinds.is_empty() {
        return Err(Error::Config("no perturbation kinds given".into()).into());
    }
    Ok(kinds)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Train { config, quiet } => {
            let cfg = RunConfig::load(&config)?;
            let (outcome, files) = train::run(&cfg, |event| match event {
                TrainEvent::Step { epoch, step, loss } if !quiet => {
                    eprintln!("epoch {epoch} step {step} loss {:.4} (det {:.4} bce {:.4} dice {:.4})", loss.total, loss.det, loss.bce, loss.dice)
                }
                TrainEvent::Validated(r) => eprintln!("validate epoch {} step {} score {:.4}", r.epoch, r.step, r.score),
                _ => {}
            })?;
            eprintln!("best score {:?}; wrote {} and {}", outcome.best.score, files.best.display(), files.history.display());
        }
        Cmd::Eval { ckpt, manifest, include_authentic_pixels, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let samples = load_samples(&manifest)?;
            let report = with_pipeline(&ck, |p| Ok(evaluate(p, &samples, include_authentic_pixels)?))?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(&path, format!("{text}\n")).map_err(|e| Error::io(&path, e))?;
            }
            println!("{text}");
        }
        Cmd::Infer { ckpt, image, out, dump_features: dump } => {
            let ck = load_checkpoint(&ckpt)?;
            let (_, outputs) = with_pipeline(&ck, |p| {
                let result = infer(p, &image, &out)?;
                if dump {
                    let img = pad_image(&prx::data::read_rgb(&image)?);
                    let features = p.model.filters.extract_features(&img).map_err(Error::from)?;
                    dump_features(&features, &out, "features")?;
                }
                Ok(result)
            })?;
            println!("{}", serde_json::to_string(&outputs.verdict)?);
        }
        Cmd::PerturbSweep { ckpt, manifest, kinds, severities, out, seed } => {
            let kinds = parse_kinds(&kinds)?;
            let codec = if kinds.contains(&PerturbationKind::Jpeg2000) { available_codec() } else { None };
            let codec_ref = codec.as_ref().map(|c| c as &dyn prx_core::datakit::Jpeg2000Codec);
            let missing = unsupported_kinds(&kinds, codec_ref);
            if !missing.is_empty() {
                return Err(Error::Unsupported(missing).into());
            }
            let ck = load_checkpoint(&ckpt)?;
            let samples = load_samples(&manifest)?;
            let rows = with_pipeline(&ck, |p| Ok(sweep(p, &samples, &kinds, &severities, seed, codec_ref)?))?;
            for path in write_outputs(&rows, &kinds, &out)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Cmd::Synth { kind, n, seed, out, size } => {
            let kinds = match kind.as_str() {
                "mixed" => {
                    let mut k = SynthKind::MANIPULATIONS.to_vec();
                    k.push(SynthKind::Authentic);
                    k
                }
                other => vec![SynthKind::parse(other).map_err(Error::from)?],
            };
            let manifest = synthesize(&kinds, n, seed, size, &out)?;
            eprintln!("appended {n} samples to {}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
