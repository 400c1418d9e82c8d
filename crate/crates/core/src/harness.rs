//! Training loop, evaluation driver and the three-arm ablation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ambiguity::{AmbiguityNetConfig, CovarianceMode};
use crate::checkpoint;
use crate::data::{rater_view, AmbiguousSample, RaterMode};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_testset, MaskRole, MaskSet, MetricOptions, TestsetReport};
use crate::model::{Model, ModelConfig, TrainBatch};
use crate::objectives::{LossReport, LossWeights};
use crate::params::Adam;
use crate::sampler::{sample_masks, SampleRequest};
use crate::schedule::{ScheduleConfig, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::seeding;
use crate::tensor::Tensor;

/// The three ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Random rater per step, ambiguity networks active.
    Cimd,
    /// Averaged rater mask, no ambiguity networks.
    DdpmDetSeg,
    /// Random rater per step, no ambiguity networks.
    DdpmProbSeg,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Cimd, TrainMode::DdpmProbSeg, TrainMode::DdpmDetSeg];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Cimd => "cimd",
            TrainMode::DdpmDetSeg => "ddpm-det-seg",
            TrainMode::DdpmProbSeg => "ddpm-prob-seg",
        }
    }

    pub fn rater_mode(self) -> RaterMode {
        match self {
            TrainMode::DdpmDetSeg => RaterMode::Averaged,
            TrainMode::Cimd | TrainMode::DdpmProbSeg => RaterMode::RandomRater,
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode {s:?}")))
    }
}

/// Every knob of a training run. Serialises to a flat TOML table; missing
/// keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Diffusion steps `T`.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Scale both endpoints by `1000 / T`.
    pub rescale_schedule: bool,
    /// Weight of the variational bound.
    pub lambda: f64,
    /// Weight of the latent KL; ignored (zero) outside `cimd`.
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub covariance_mode: CovarianceMode,
    pub freeze_offdiag: bool,
    pub eval_samples: usize,
    /// `0` disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    pub latent_dim: usize,
    pub amn_filters: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let amb = AmbiguityNetConfig::default();
        let den = DenoiserConfig::default();
        TrainConfig {
            mode: TrainMode::Cimd,
            diffusion_steps: 100,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            rescale_schedule: true,
            lambda: 0.001,
            beta: 0.001,
            learning_rate: 1e-4,
            batch_size: 16,
            steps: 5000,
            seed: 0,
            covariance_mode: amb.covariance_mode,
            freeze_offdiag: false,
            eval_samples: 4,
            checkpoint_every: 0,
            log_every: 10,
            image_size: den.image_size,
            base_channels: den.base_channels,
            channel_multipliers: den.channel_multipliers,
            time_embed_dim: den.time_embed_dim,
            latent_dim: amb.latent_dim,
            amn_filters: amb.filters,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_samples == 0 || self.log_every == 0 {
            return Err(Error::invalid("batch_size, eval_samples and log_every must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        self.weights().validate()?;
        self.model_config(1)?.schedule.build()?;
        Ok(())
    }

    /// Loss weights with `β` forced to zero outside `cimd`.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            beta: if self.mode == TrainMode::Cimd { self.beta } else { 0.0 },
        }
    }

    pub fn model_config(&self, prior_channels: usize) -> Result<ModelConfig> {
        let denoiser = DenoiserConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            prior_channels,
            time_embed_dim: self.time_embed_dim,
        };
        denoiser.validate()?;
        let ambiguity = (self.mode == TrainMode::Cimd).then(|| AmbiguityNetConfig {
            filters: self.amn_filters.clone(),
            latent_dim: self.latent_dim,
            covariance_mode: self.covariance_mode,
            freeze_offdiag: self.freeze_offdiag,
        });
        if let Some(a) = &ambiguity {
            a.validate()?;
        }
        Ok(ModelConfig {
            denoiser,
            schedule: ScheduleConfig {
                steps: self.diffusion_steps,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
                rescale: self.rescale_schedule,
            },
            ambiguity,
        })
    }
}

/// One NDJSON training log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_simple: f64,
    pub l_vlb: f64,
    pub l_amb: f64,
    pub total: f64,
}

impl LogRecord {
    fn new(step: usize, r: &LossReport) -> Self {
        LogRecord {
            step,
            l_simple: r.l_simple,
            l_vlb: r.l_vlb,
            l_amb: r.l_amb,
            total: r.total,
        }
    }
}

/// Where a run writes its artifacts. Both are optional.
#[derive(Debug, Clone, Default)]
pub struct RunFiles {
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
}

fn check_dataset(samples: &[AmbiguousSample], size: usize) -> Result<usize> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty dataset"))?;
    let (_, c, _, _) = first.image.dims4();
    for s in samples {
        let (_, sc, h, w) = s.image.dims4();
        if (sc, h, w) != (c, size, size) {
            return Err(Error::invalid(format!(
                "sample {} is {sc}x{h}x{w}, expected {c}x{size}x{size}",
                s.id()
            )));
        }
        if s.rater_masks.is_empty() {
            return Err(Error::invalid(format!("sample {} has no rater masks", s.id())));
        }
    }
    Ok(c)
}

/// Draws one minibatch: samples with replacement, a training mask per the
/// mode, a uniform timestep and fresh noise per element.
fn draw_batch<R: Rng + ?Sized>(
    samples: &[AmbiguousSample],
    mode: TrainMode,
    batch_size: usize,
    steps: usize,
    rng: &mut R,
) -> TrainBatch {
    let mut images = Vec::with_capacity(batch_size);
    let mut masks = Vec::with_capacity(batch_size);
    let mut ts = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let s = &samples[rng.gen_range(0..samples.len())];
        let (b, m) = rater_view(s, mode.rater_mode(), rng).swap_remove(0);
        let (h, w) = s.size();
        images.push(b);
        masks.push(Tensor::new([1, 1, h, w], m.to_signed()).expect("mask shape"));
        ts.push(rng.gen_range(1..=steps));
    }
    let x0 = Tensor::stack(&masks).expect("uniform masks");
    let eps = Tensor::randn(x0.shape().to_vec(), rng);
    TrainBatch {
        b: Tensor::stack(&images).expect("uniform images"),
        x0,
        ts,
        eps,
    }
}

fn checkpoint_meta(cfg: &TrainConfig, step: usize) -> serde_json::Value {
    serde_json::json!({ "train_config": cfg, "step": step })
}

/// Trains a fresh model on `samples`.
///
/// A non-finite loss or gradient aborts with [`Error::NonFinite`]; the
/// checkpoint file, if any, still holds the last good state.
pub fn train(cfg: &TrainConfig, samples: &[AmbiguousSample], files: &RunFiles) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prior = check_dataset(samples, cfg.image_size)?;
    let mut model = Model::init(cfg.model_config(prior)?, cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut rng = seeding::stream(cfg.seed, seeding::TRAINING);
    let w = cfg.weights();
    let mut sink = match &files.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let save = |model: &Model, step: usize| -> Result<()> {
        match &files.checkpoint {
            Some(p) => checkpoint::save(p, model, &checkpoint_meta(cfg, step)),
            None => Ok(()),
        }
    };
    save(&model, 0)?;
    let mut log = Vec::new();
    for step in 1..=cfg.steps {
        let batch = draw_batch(samples, cfg.mode, cfg.batch_size, cfg.diffusion_steps, &mut rng);
        let (report, grads) = model.loss_and_grads(&batch, w).map_err(|e| match e {
            Error::NonFinite { term, .. } => Error::NonFinite { term, step: step as u64 },
            e => e,
        })?;
        if let Some(id) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
            return Err(Error::NonFinite {
                term: format!("gradient of {}", model.params.name(id)),
                step: step as u64,
            });
        }
        adam.step(&mut model.params, &grads);
        if step % cfg.log_every == 0 || step == cfg.steps {
            let rec = LogRecord::new(step, &report);
            if let Some(out) = sink.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(out, "{line}").map_err(|e| Error::io(files.log.as_ref().unwrap(), e))?;
            }
            log.push(rec);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save(&model, step)?;
        }
    }
    if let Some(mut out) = sink {
        out.flush().map_err(|e| Error::io(files.log.as_ref().unwrap(), e))?;
    }
    save(&model, cfg.steps)?;
    Ok(TrainOutcome { model, log })
}

/// Mean `l_simple` over `batches` held-out minibatches drawn with `seed`.
pub fn heldout_l_simple(
    model: &Model,
    samples: &[AmbiguousSample],
    mode: TrainMode,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    check_dataset(samples, model.config().denoiser.image_size)?;
    let mut rng = seeding::stream(seed, seeding::EVALUATION);
    let steps = model.schedule().steps();
    let w = LossWeights { lambda: 0.0, beta: 0.0 };
    let mut acc = 0.0;
    for _ in 0..batches {
        let batch = draw_batch(samples, mode, batch_size, steps, &mut rng);
        acc += model.loss(&batch, w)?.l_simple;
    }
    Ok(acc / batches.max(1) as f64)
}

/// Anything that can propose `n` masks for a test image.
pub trait MaskSource {
    fn predict(&self, sample: &AmbiguousSample, n: usize, seed: u64) -> Result<MaskSet>;
}

impl MaskSource for Model {
    fn predict(&self, sample: &AmbiguousSample, n: usize, seed: u64) -> Result<MaskSet> {
        sample_masks(self, &SampleRequest::new(sample.image.clone(), n, seed))
    }
}

/// Per-image seed for evaluation draws.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    seeding::mix(seeding::mix(seed, seeding::EVALUATION), index as u64)
}

/// `n` predictions for every sample, in order.
pub fn predict_all<S: MaskSource + ?Sized>(
    source: &S,
    samples: &[AmbiguousSample],
    n: usize,
    seed: u64,
) -> Result<Vec<MaskSet>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| source.predict(s, n, eval_seed(seed, i)))
        .collect()
}

pub fn ground_truth(sample: &AmbiguousSample) -> Result<MaskSet> {
    MaskSet::new(sample.rater_masks.clone(), MaskRole::GroundTruth)
}

/// Scores `n` predictions per sample against its raters.
pub fn evaluate<S: MaskSource + ?Sized>(
    source: &S,
    samples: &[AmbiguousSample],
    n: usize,
    seed: u64,
    opts: MetricOptions,
) -> Result<TestsetReport> {
    let preds = predict_all(source, samples, n, seed)?;
    score(samples, &preds, opts)
}

pub fn score(samples: &[AmbiguousSample], preds: &[MaskSet], opts: MetricOptions) -> Result<TestsetReport> {
    let ids: Vec<String> = samples.iter().map(|s| s.id().to_string()).collect();
    let gts = samples.iter().map(ground_truth).collect::<Result<Vec<_>>>()?;
    evaluate_testset(&ids, preds, &gts, opts)
}

/// Fraction of empty masks among all predictions.
pub fn blank_fraction(preds: &[MaskSet]) -> f64 {
    let total: usize = preds.iter().map(|p| p.len()).sum();
    let blank = preds.iter().flat_map(|p| p.masks()).filter(|m| m.is_empty()).count();
    blank as f64 / total.max(1) as f64
}

pub const ABLATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub mode: TrainMode,
    /// 1 is best by `ci`.
    pub rank: usize,
    pub ged: f64,
    pub ci: Option<f64>,
    pub d_max: f64,
    /// Share of blank masks among all evaluation draws.
    pub blank_fraction: f64,
    pub final_total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub train_images: usize,
    pub test_images: usize,
    pub eval_samples: usize,
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn arm(&self, mode: TrainMode) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.mode == mode)
    }
}

/// A trained arm together with its evaluation draws.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub mode: TrainMode,
    pub outcome: TrainOutcome,
    pub predictions: Vec<MaskSet>,
    pub report: TestsetReport,
}

/// Trains and evaluates one arm of `base` with the mode replaced.
pub fn run_arm(
    base: &TrainConfig,
    mode: TrainMode,
    train_set: &[AmbiguousSample],
    test_set: &[AmbiguousSample],
    files: &RunFiles,
) -> Result<ArmRun> {
    let cfg = TrainConfig {
        mode,
        ..base.clone()
    };
    let outcome = train(&cfg, train_set, files)?;
    let predictions = predict_all(&outcome.model, test_set, cfg.eval_samples, cfg.seed)?;
    let report = score(test_set, &predictions, MetricOptions::default())?;
    Ok(ArmRun {
        mode,
        outcome,
        predictions,
        report,
    })
}

/// Ranks finished arms by `ci`, undefined `ci` last, ties broken by `ged`.
pub fn ablation_report(runs: &[ArmRun], train_images: usize, eval_samples: usize) -> AblationReport {
    let mut arms: Vec<ArmResult> = runs
        .iter()
        .map(|r| ArmResult {
            mode: r.mode,
            rank: 0,
            ged: r.report.mean.ged,
            ci: r.report.mean.ci,
            d_max: r.report.mean.d_max,
            blank_fraction: blank_fraction(&r.predictions),
            final_total_loss: r.outcome.log.last().map_or(f64::NAN, |l| l.total),
        })
        .collect();
    arms.sort_by(|a, b| {
        let key = |x: &ArmResult| x.ci.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then(a.ged.total_cmp(&b.ged))
    });
    for (i, a) in arms.iter_mut().enumerate() {
        a.rank = i + 1;
    }
    AblationReport {
        schema_version: ABLATION_SCHEMA_VERSION,
        train_images,
        test_images: runs.first().map_or(0, |r| r.report.images.len()),
        eval_samples,
        arms,
    }
}

/// Trains every arm in `modes` from `base` with shared seed and budget.
pub fn run_ablation_arms(
    train_set: &[AmbiguousSample],
    test_set: &[AmbiguousSample],
    base: &TrainConfig,
    modes: &[TrainMode],
) -> Result<(AblationReport, Vec<ArmRun>)> {
    let runs = modes
        .iter()
        .map(|&m| run_arm(base, m, train_set, test_set, &RunFiles::default()))
        .collect::<Result<Vec<_>>>()?;
    Ok((ablation_report(&runs, train_set.len(), base.eval_samples), runs))
}

/// The standard three-arm comparison.
pub fn run_ablation(
    train_set: &[AmbiguousSample],
    test_set: &[AmbiguousSample],
    base: &TrainConfig,
) -> Result<AblationReport> {
    Ok(run_ablation_arms(train_set, test_set, base, &TrainMode::ALL)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn tiny_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            diffusion_steps: 50,
            batch_size: 4,
            steps: 3,
            log_every: 1,
            image_size: 8,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            time_embed_dim: 8,
            latent_dim: 3,
            amn_filters: vec![4, 6, 8, 8],
            ..TrainConfig::default()
        }
    }

    fn tiny_data(count: usize) -> Vec<AmbiguousSample> {
        generate_synthetic(&SynthConfig {
            image_size: 8,
            boundary_jitter: 1,
            count,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn config_toml_round_trip_and_defaults() {
        let cfg = tiny_cfg(TrainMode::DdpmProbSeg);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("mode = \"ddpm-det-seg\"\nsteps = 7\n").unwrap();
        assert_eq!(partial.mode, TrainMode::DdpmDetSeg);
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.learning_rate, 1e-4);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
    }

    #[test]
    fn ddpm_modes_drop_the_ambiguity_networks() {
        for mode in [TrainMode::DdpmDetSeg, TrainMode::DdpmProbSeg] {
            let cfg = tiny_cfg(mode);
            assert_eq!(cfg.weights().beta, 0.0);
            let out = train(&cfg, &tiny_data(4), &RunFiles::default()).unwrap();
            assert!(!out.model.params.has_prefix("amn.") && !out.model.params.has_prefix("acn."));
        }
        let cimd = train(&tiny_cfg(TrainMode::Cimd), &tiny_data(4), &RunFiles::default()).unwrap();
        assert!(cimd.model.params.has_prefix("amn.") && cimd.model.params.has_prefix("acn."));
    }

    #[test]
    fn zero_steps_returns_the_initialisation() {
        let cfg = TrainConfig { steps: 0, ..tiny_cfg(TrainMode::Cimd) };
        let out = train(&cfg, &tiny_data(4), &RunFiles::default()).unwrap();
        let init = Model::init(cfg.model_config(1).unwrap(), cfg.seed).unwrap();
        assert_eq!(out.model.params, init.params);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_bit_reproducible_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let files = RunFiles {
            log: Some(dir.path().join("log.ndjson")),
            checkpoint: Some(dir.path().join("m.ckpt")),
        };
        let cfg = tiny_cfg(TrainMode::Cimd);
        let data = tiny_data(6);
        let a = train(&cfg, &data, &files).unwrap();
        let b = train(&cfg, &data, &RunFiles::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params, b.model.params);
        let text = std::fs::read_to_string(files.log.as_ref().unwrap()).unwrap();
        let lines: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, a.log);
        let ck = checkpoint::load(files.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(ck.model.params, a.model.params);
        assert_eq!(ck.meta["step"], 3);
    }

    #[test]
    fn wrong_image_size_rejected() {
        let cfg = TrainConfig { image_size: 16, ..tiny_cfg(TrainMode::Cimd) };
        assert!(train(&cfg, &tiny_data(2), &RunFiles::default()).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let cfg = TrainConfig { learning_rate: 1e300, steps: 5, ..tiny_cfg(TrainMode::DdpmProbSeg) };
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("m.ckpt");
        let files = RunFiles { log: None, checkpoint: Some(ck.clone()) };
        let err = train(&cfg, &tiny_data(4), &files).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step, .. } if step > 1), "{err}");
        // Last good state (the initialisation) is still on disk.
        assert!(checkpoint::load(&ck).is_ok());
    }

    struct Oracle;

    impl MaskSource for Oracle {
        fn predict(&self, sample: &AmbiguousSample, _n: usize, _seed: u64) -> Result<MaskSet> {
            MaskSet::new(sample.rater_masks.clone(), MaskRole::Prediction)
        }
    }

    #[test]
    fn oracle_scores_perfectly() {
        let data = tiny_data(5);
        let r = evaluate(&Oracle, &data, 4, 0, MetricOptions::default()).unwrap();
        assert_eq!(r.mean.ged, 0.0);
        assert_eq!(r.mean.ci, Some(1.0));
    }

    #[test]
    fn single_draw_flags_undefined_dispersion() {
        let mut data = tiny_data(3);
        for s in &mut data {
            s.rater_masks.truncate(1);
        }
        let model = Model::init(tiny_cfg(TrainMode::DdpmProbSeg).model_config(1).unwrap(), 0).unwrap();
        let r = evaluate(&model, &data, 1, 0, MetricOptions::default()).unwrap();
        assert!(r.images.iter().all(|i| i.scores.d_a_undefined && i.scores.ci.is_none()));
        assert_eq!(r.mean.d_a_defined, 0);
        assert_eq!(r, evaluate(&model, &data, 1, 0, MetricOptions::default()).unwrap());
    }

    #[test]
    fn identical_arms_give_identical_metrics() {
        let data = tiny_data(8);
        let (train_set, test_set) = data.split_at(6);
        let cfg = TrainConfig { steps: 2, ..tiny_cfg(TrainMode::Cimd) };
        let (report, _) = run_ablation_arms(
            train_set,
            test_set,
            &cfg,
            &[TrainMode::DdpmProbSeg, TrainMode::DdpmProbSeg],
        )
        .unwrap();
        let (a, b) = (&report.arms[0], &report.arms[1]);
        assert_eq!((a.ged, a.ci, a.d_max), (b.ged, b.ci, b.d_max));
    }

    #[test]
    fn ablation_has_three_ranked_arms() {
        let data = tiny_data(7);
        let (train_set, test_set) = data.split_at(5);
        let cfg = TrainConfig { steps: 1, ..tiny_cfg(TrainMode::Cimd) };
        let report = run_ablation(train_set, test_set, &cfg).unwrap();
        assert_eq!(report.arms.len(), 3);
        let ranks: Vec<usize> = report.arms.iter().map(|a| a.rank).collect();
        assert_eq!(ranks, [1, 2, 3]);
        for m in TrainMode::ALL {
            assert!(report.arm(m).is_some());
        }
    }
}
