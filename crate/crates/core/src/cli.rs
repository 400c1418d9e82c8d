//! Command-line front end. `main` only parses and calls [`run`].

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, generate_synthetic, load_dataset, save_dataset, AmbiguousSample, SynthConfig};
use crate::error::{Error, Result};
use crate::harness::{self, ground_truth, predict_all, RunFiles, TrainConfig};
use crate::metrics::{Dispersion, MetricOptions, PairConvention};
use crate::model::Model;
use crate::plot::{save_grid, standard_columns, PlotRow, PlotSpec};
use crate::sampler::{sample_masks, SampleRequest};

#[derive(Debug, Parser)]
#[command(name = "ambiseg", version, about = "Diffusion models for ambiguous segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-rater dataset.
    GenerateData(GenerateArgs),
    /// Train one model and write its checkpoint and log.
    Train(TrainArgs),
    /// Draw masks for one image of a dataset.
    Sample(SampleArgs),
    /// Score a checkpoint against every image of a dataset.
    Evaluate(EvaluateArgs),
    /// Train and compare the three arms on a train/test split.
    Ablate(AblateArgs),
    /// Render input, rater and sample grids.
    Plot(PlotArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, default_value_t = 4)]
    pub raters: usize,
    #[arg(long, default_value_t = 0.5)]
    pub blank_prob: f64,
    #[arg(long, default_value_t = 1)]
    pub jitter: u32,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
}

/// Flags that override keys of the config file.
#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// Flat TOML file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(m) = &self.mode {
            cfg.mode = m.parse()?;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for `model.ckpt`, `train.ndjson` and `config.toml`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, clap::Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub image_id: String,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PairsArg {
    All,
    Distinct,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DispersionArg {
    Iou,
    PixelVariance,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PairsArg::All)]
    pub pairs: PairsArg,
    #[arg(long, value_enum, default_value_t = DispersionArg::Iou)]
    pub dispersion: DispersionArg,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of trailing samples held out for evaluation.
    #[arg(long, default_value_t = 50)]
    pub test_count: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated ids; the first four samples when absent.
    #[arg(long, value_delimiter = ',')]
    pub image_ids: Vec<String>,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
    #[arg(long)]
    pub out: PathBuf,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Written next to the `sample_{i}.png` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub schema_version: u32,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub image_id: String,
    pub seed: u64,
    pub n: usize,
    pub threshold: f64,
    pub files: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Plot(a) => plot(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = SynthConfig {
        image_size: a.image_size,
        num_raters: a.raters,
        blank_prob: a.blank_prob,
        boundary_jitter: a.jitter,
        channels: a.channels,
        count: a.count,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let samples = generate_synthetic(&cfg)?;
    save_dataset(&a.out, &samples, Some(&cfg))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let samples = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let cfg_path = a.out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let files = RunFiles {
        log: Some(a.out.join("train.ndjson")),
        checkpoint: Some(a.out.join("model.ckpt")),
    };
    harness::train(&cfg, &samples, &files)?;
    Ok(())
}

fn find<'a>(samples: &'a [AmbiguousSample], id: &str) -> Result<&'a AmbiguousSample> {
    samples
        .iter()
        .find(|s| s.id() == id)
        .ok_or_else(|| Error::invalid(format!("no image with id {id:?}")))
}

fn sample(a: SampleArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let samples = load_dataset(&a.data)?;
    let target = find(&samples, &a.image_id)?;
    let mut req = SampleRequest::new(target.image.clone(), a.n, a.seed);
    req.binarize_threshold = a.threshold;
    let masks = sample_masks(&model, &req)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut files = Vec::new();
    for (i, m) in masks.masks().iter().enumerate() {
        let name = format!("sample_{i}.png");
        let path = a.out.join(&name);
        image::GrayImage::from_raw(
            m.width() as u32,
            m.height() as u32,
            m.bits().iter().map(|&b| b * 255).collect(),
        )
        .expect("mask buffer size")
        .save(&path)
        .map_err(|e| Error::format(&path, e.to_string()))?;
        files.push(name);
    }
    let manifest = SampleManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        checkpoint: a.checkpoint.display().to_string(),
        checkpoint_sha256: checkpoint::file_hash(&a.checkpoint)?,
        image_id: a.image_id,
        seed: a.seed,
        n: a.n,
        threshold: a.threshold,
        files,
    };
    data::write_json(&a.out.join("manifest.json"), &manifest)
}

fn check_prior(model: &Model, samples: &[AmbiguousSample]) -> Result<()> {
    let cfg = &model.config().denoiser;
    let expect = [1, cfg.prior_channels, cfg.image_size, cfg.image_size];
    match samples.iter().find(|s| s.image.shape() != expect) {
        Some(s) => Err(Error::CheckpointMismatch(format!(
            "checkpoint expects images of shape {expect:?}, sample {} has {:?}",
            s.id(),
            s.image.shape()
        ))),
        None => Ok(()),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => data::write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let samples = load_dataset(&a.data)?;
    check_prior(&model, &samples)?;
    let opts = MetricOptions {
        pairs: match a.pairs {
            PairsArg::All => PairConvention::AllPairs,
            PairsArg::Distinct => PairConvention::Distinct,
        },
        dispersion: match a.dispersion {
            DispersionArg::Iou => Dispersion::IouDistance,
            DispersionArg::PixelVariance => Dispersion::PixelVariance,
        },
    };
    let report = harness::evaluate(&model, &samples, a.n, a.seed, opts)?;
    emit(&report, a.out.as_deref())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let (train_set, test_set) = data::split(load_dataset(&a.data)?, a.test_count)?;
    let report = harness::run_ablation(&train_set, &test_set, &cfg)?;
    emit(&report, a.out.as_deref())
}

fn plot(a: PlotArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let samples = load_dataset(&a.data)?;
    check_prior(&model, &samples)?;
    let ids = if a.image_ids.is_empty() {
        samples.iter().take(4).map(|s| s.id().to_string()).collect()
    } else {
        a.image_ids
    };
    let chosen = ids.iter().map(|id| find(&samples, id).cloned()).collect::<Result<Vec<_>>>()?;
    let preds = predict_all(&model, &chosen, a.n, a.seed)?;
    let gts = chosen.iter().map(ground_truth).collect::<Result<Vec<_>>>()?;
    let raters = gts.iter().map(|g| g.len()).max().unwrap_or(0);
    let rows: Vec<PlotRow> = chosen
        .iter()
        .zip(gts.iter().zip(&preds))
        .map(|(s, (g, p))| PlotRow {
            image: &s.image,
            ground_truth: g.masks(),
            samples: p.masks(),
        })
        .collect();
    let spec = PlotSpec {
        image_ids: ids,
        columns: standard_columns(raters, a.n),
        scale: a.scale,
    };
    save_grid(&a.out, &spec, &rows)
}
