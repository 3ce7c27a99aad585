//! Fine-tuning loop for the denoiser with frozen autoencoder and text encoder.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::PixelImage;
use crate::data::{DatasetManifest, LoadedSample, Split, BASE_PROMPT};
use crate::diffusion::{
    sample, sample_batch, training_loss, GuidanceConfig, NoiseSchedule, SamplerConfig, ScheduleConfig, TrainingBatch,
};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{fmt_metric, parse_metric, ImageMetrics, MetricsReport};
use crate::model::{save_checkpoint, ModelBundle, TextEmbedding};
use crate::raster::{labeled_row, upscale};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const VAL_LOG_FILE: &str = "val_log.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BASELINE_METRICS_FILE: &str = "baseline_metrics.csv";
pub const FINAL_METRICS_FILE: &str = "final_metrics.csv";
pub const PASSTHROUGH_METRICS_FILE: &str = "passthrough_metrics.csv";
pub const STAGE_GRID_FILE: &str = "stages.png";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate of the original large-model recipe.
    pub reference_learning_rate: f64,
    /// Scale from the reference rate to the rate used for the compact denoiser.
    pub lr_multiplier: f64,
    pub batch_size: usize,
    pub n_prompts: usize,
    pub max_steps: usize,
    /// Validation interval; `None` means every `max_steps / 10` steps.
    pub val_every: Option<usize>,
    /// Early/middle/late snapshot steps; `None` derives them from `max_steps`.
    pub snapshot_steps: Option<[usize; 3]>,
    pub seed: u64,
    /// Seed for validation sampling noise, shared by all runs to be compared.
    pub val_seed: u64,
    /// Validate the untouched model before the first update.
    pub baseline_validation: bool,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            reference_learning_rate: 5e-6,
            lr_multiplier: 100.0,
            batch_size: 4,
            n_prompts: 30,
            max_steps: 50,
            val_every: None,
            snapshot_steps: None,
            seed: 0,
            val_seed: 0,
            baseline_validation: true,
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reads a `.json` or TOML file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).at(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn learning_rate(&self) -> f64 {
        self.reference_learning_rate * self.lr_multiplier
    }

    pub fn val_interval(&self) -> usize {
        self.val_every.unwrap_or((self.max_steps / 10).max(1))
    }

    pub fn snapshots(&self) -> [usize; 3] {
        self.snapshot_steps.unwrap_or_else(|| {
            let m = self.max_steps;
            let early = (m / 5).max(1);
            [early, (m / 2).max(early + 1), m]
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate().is_finite() && self.learning_rate() > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate()));
        }
        if self.batch_size == 0 || self.n_prompts == 0 || self.max_steps == 0 || self.val_interval() == 0 {
            return bad("batch_size, n_prompts, max_steps and val_every must be positive".into());
        }
        let [a, b, c] = self.snapshots();
        if !(0 < a && a < b && b < c && c <= self.max_steps) {
            return bad(format!(
                "snapshot steps {:?} must be strictly increasing within 1..={}",
                [a, b, c],
                self.max_steps
            ));
        }
        self.schedule.build()?;
        self.guidance.validate()?;
        self.sampler.validate(&self.schedule.build()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Early,
    Middle,
    Late,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Early, Stage::Middle, Stage::Late];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Early => "early",
            Stage::Middle => "middle",
            Stage::Late => "late",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub lab_mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

impl ValPoint {
    fn from_report(step: usize, r: &MetricsReport) -> Self {
        Self {
            step,
            lab_mse: r.lab_mse,
            psnr: r.psnr_db,
            ssim: r.ssim,
            mae: r.mae,
        }
    }
}

/// Per-step training loss, periodic validation metrics and step timings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub train: Vec<TrainPoint>,
    pub val: Vec<ValPoint>,
    pub step_seconds: Vec<f64>,
}

impl RunLog {
    pub fn train_csv(&self) -> String {
        let mut s = String::from("step,train_loss\n");
        for p in &self.train {
            let _ = writeln!(s, "{},{}", p.step, p.loss);
        }
        s
    }

    pub fn val_csv(&self) -> String {
        let mut s = String::from("step,lab_mse,psnr,ssim,mae\n");
        for p in &self.val {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                p.step,
                fmt_metric(p.lab_mse),
                fmt_metric(p.psnr),
                fmt_metric(p.ssim),
                fmt_metric(p.mae)
            );
        }
        s
    }

    /// Writes the two CSV logs and the timing file into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, body) in [(TRAIN_LOG_FILE, self.train_csv()), (VAL_LOG_FILE, self.val_csv())] {
            let path = dir.join(name);
            fs::write(&path, body).at(&path)?;
        }
        let path = dir.join(TIMING_FILE);
        fs::write(&path, serde_json::to_string(&self.step_seconds)?).at(&path)?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let rows = |name: &str| -> Result<Vec<Vec<String>>> {
            let path = dir.join(name);
            let mut r = csv::Reader::from_path(&path)?;
            r.records()
                .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
                .collect()
        };
        let num = |s: &str| parse_metric(s).ok_or_else(|| Error::Dataset(format!("bad number {s:?} in run log")));
        let step = |s: &str| s.parse::<usize>().map_err(|_| Error::Dataset(format!("bad step {s:?} in run log")));
        let mut log = RunLog::default();
        for r in rows(TRAIN_LOG_FILE)? {
            log.train.push(TrainPoint {
                step: step(&r[0])?,
                loss: num(&r[1])?,
            });
        }
        for r in rows(VAL_LOG_FILE)? {
            log.val.push(ValPoint {
                step: step(&r[0])?,
                lab_mse: num(&r[1])?,
                psnr: num(&r[2])?,
                ssim: num(&r[3])?,
                mae: num(&r[4])?,
            });
        }
        let timing = dir.join(TIMING_FILE);
        if timing.exists() {
            log.step_seconds = serde_json::from_str(&fs::read_to_string(&timing).at(&timing)?)?;
        }
        Ok(log)
    }

    /// Step indices strictly increase and logged values are finite (PSNR may
    /// be +∞ for a perfect reconstruction).
    pub fn check(&self) -> Result<()> {
        let increasing = |steps: Vec<usize>| steps.windows(2).all(|w| w[0] < w[1]);
        if !increasing(self.train.iter().map(|p| p.step).collect()) || !increasing(self.val.iter().map(|p| p.step).collect()) {
            return Err(Error::InvalidArgument("run log steps are not strictly increasing".into()));
        }
        let finite = self.train.iter().all(|p| p.loss.is_finite())
            && self
                .val
                .iter()
                .all(|p| p.lab_mse.is_finite() && !p.psnr.is_nan() && p.ssim.is_finite() && p.mae.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("run log holds non-finite values".into()));
        }
        Ok(())
    }

    /// Mean training loss over the first and the last quarter of steps.
    pub fn quartile_means(&self) -> Option<(f64, f64)> {
        let n = self.train.len();
        let q = n / 4;
        if q == 0 {
            return None;
        }
        let mean = |s: &[TrainPoint]| s.iter().map(|p| p.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.train[..q]), mean(&self.train[n - q..])))
    }
}

/// Colorizations of a set of validation samples and their metrics.
#[derive(Debug, Clone)]
pub struct Validation {
    pub report: MetricsReport,
    pub images: Vec<PixelImage>,
}

/// Samples every validation image with the base prompt and scores it
/// against its color target. Image `i` uses noise seed `seed + i`.
pub fn validate(
    bundle: &ModelBundle,
    samples: &[LoadedSample],
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Validation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let mut images = Vec::with_capacity(samples.len());
    let mut rows = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(8).enumerate() {
        let grays: Vec<&PixelImage> = chunk.iter().map(|s| &s.input).collect();
        let prompts = vec![BASE_PROMPT; chunk.len()];
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| seed.wrapping_add((c * 8 + i) as u64)).collect();
        let out = sample_batch(bundle, sched, &grays, &prompts, guidance, sampler, &seeds)?;
        for (s, img) in chunk.iter().zip(out) {
            rows.push(ImageMetrics::compute(s.name.clone(), &img, &s.target)?);
            images.push(img);
        }
    }
    Ok(Validation {
        report: MetricsReport::from_rows(rows)?,
        images,
    })
}

/// Metrics of the "model" that returns its grayscale input unchanged.
pub fn passthrough_report(samples: &[LoadedSample]) -> Result<MetricsReport> {
    let rows = samples
        .iter()
        .map(|s| ImageMetrics::compute(s.name.clone(), &s.input, &s.target))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(rows)
}

/// Colorizes the probe image at a training stage.
pub fn snapshot_probe(
    bundle: &ModelBundle,
    probe: &LoadedSample,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<PixelImage> {
    sample(bundle, sched, &probe.input, BASE_PROMPT, &cfg.guidance, &cfg.sampler, cfg.val_seed)
}

/// Input, one labeled panel per stage, and target, side by side.
pub fn stage_grid(probe: &LoadedSample, stages: &[(Stage, usize, PixelImage)]) -> PixelImage {
    let k = if probe.input.width() < 96 { 2 } else { 1 };
    let input = upscale(&probe.input, k);
    let target = upscale(&probe.target, k);
    let scaled: Vec<(String, PixelImage)> = stages
        .iter()
        .map(|(s, step, img)| (format!("{} {step}", s.name()), upscale(img, k)))
        .collect();
    let mut panels: Vec<(String, &PixelImage)> = vec![("input".into(), &input)];
    panels.extend(scaled.iter().map(|(l, img)| (l.clone(), img)));
    panels.push(("target".into(), &target));
    labeled_row(&panels, 1)
}

/// The training pool after applying `n_prompts`: the first `n` distinct
/// training prompts in manifest order. Samples whose prompt falls outside
/// the pool are reassigned round-robin by their prompt's first-appearance
/// index.
pub fn active_prompts(manifest: &DatasetManifest, n_prompts: usize) -> (Vec<String>, HashMap<String, String>) {
    let distinct = manifest.train_prompts();
    let n = n_prompts.min(distinct.len()).max(1);
    if n_prompts > distinct.len() {
        log::warn!("{n_prompts} prompts requested but the manifest has {}", distinct.len());
    }
    let active: Vec<String> = distinct.iter().take(n).cloned().collect();
    let remap = distinct
        .iter()
        .enumerate()
        .map(|(j, p)| (p.clone(), active[j % n].clone()))
        .collect();
    (active, remap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub label: String,
    pub step: usize,
    pub path: PathBuf,
}

/// Everything a finished run leaves behind besides its files.
pub struct RunOutput {
    pub bundle: ModelBundle,
    pub log: RunLog,
    pub baseline: Option<MetricsReport>,
    pub final_report: MetricsReport,
    pub passthrough: MetricsReport,
    pub checkpoints: Vec<CheckpointRecord>,
    pub probes: Vec<(Stage, usize, PixelImage)>,
    pub prompts: Vec<String>,
}

/// Scalar results written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub learning_rate: f64,
    pub steps: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub prompts: Vec<String>,
    pub baseline: Option<ValPoint>,
    #[serde(rename = "final")]
    pub final_metrics: ValPoint,
    pub passthrough: ValPoint,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl RunSummary {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(SUMMARY_FILE);
        Ok(serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?)
    }
}

struct TrainCache {
    z0: Vec<Tensor>,
    z_cond: Vec<Tensor>,
    text: Vec<Tensor>,
}

fn cache_training_data(bundle: &ModelBundle, train: &[LoadedSample], remap: &HashMap<String, String>) -> Result<TrainCache> {
    let mut z0 = Vec::with_capacity(train.len());
    let mut z_cond = Vec::with_capacity(train.len());
    for chunk in train.chunks(16) {
        let targets: Vec<&PixelImage> = chunk.iter().map(|s| &s.target).collect();
        let inputs: Vec<&PixelImage> = chunk.iter().map(|s| &s.input).collect();
        let zt = bundle.encode_images(&targets)?;
        let zi = bundle.encode_images(&inputs)?;
        for i in 0..chunk.len() {
            z0.push(zt.tensor().get(i)?);
            z_cond.push(zi.tensor().get(i)?);
        }
    }
    let mut embeddings: HashMap<String, TextEmbedding> = HashMap::new();
    let mut text = Vec::with_capacity(train.len());
    for s in train {
        let prompt = remap.get(&s.prompt).unwrap_or(&s.prompt);
        if !embeddings.contains_key(prompt) {
            embeddings.insert(prompt.clone(), bundle.encode_text(prompt)?);
        }
        text.push(embeddings[prompt].tensor().clone());
    }
    Ok(TrainCache { z0, z_cond, text })
}

/// Seeded, reshuffled-every-epoch index stream.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn checkpoint(bundle: &ModelBundle, out: &Path, label: &str, records: &mut Vec<CheckpointRecord>) -> Result<()> {
    let rel = PathBuf::from("checkpoints").join(label);
    save_checkpoint(bundle, out.join(&rel))?;
    records.push(CheckpointRecord {
        label: label.to_string(),
        step: bundle.step,
        path: rel,
    });
    Ok(())
}

/// Fine-tunes the denoiser of `bundle` on the training split of `manifest`.
///
/// Writes into `out`: `config.json`, the CSV logs, `timing.json`,
/// `summary.json`, per-image metric CSVs (baseline, final, passthrough),
/// checkpoints (`initial`, `early`, `middle`, `late`, `final`) and the stage
/// probes under `snapshots/`. On divergence the run stops with an error and
/// the most recent checkpoint is the last good state.
pub fn finetune(mut bundle: ModelBundle, manifest: &DatasetManifest, cfg: &TrainConfig, out: impl AsRef<Path>) -> Result<RunOutput> {
    let out = out.as_ref();
    cfg.validate()?;
    if !bundle.freeze.autoencoder || !bundle.freeze.text_encoder {
        return Err(Error::InvalidArgument("fine-tuning requires a frozen autoencoder and text encoder".into()));
    }
    if bundle.freeze.denoiser {
        return Err(Error::InvalidArgument("the denoiser is frozen; nothing to train".into()));
    }
    if manifest.image_size != bundle.config.image_size {
        return Err(Error::InvalidArgument(format!(
            "dataset image size {} differs from model image size {}",
            manifest.image_size, bundle.config.image_size
        )));
    }
    let train = manifest.load_split(Split::Train)?;
    let val = manifest.load_split(Split::Val)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("both splits must be non-empty".into()));
    }
    let sched = cfg.schedule.build()?;
    fs::create_dir_all(out.join("snapshots")).at(out)?;
    let path = out.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)?).at(&path)?;

    let (prompts, remap) = active_prompts(manifest, cfg.n_prompts);
    let cache = cache_training_data(&bundle, &train, &remap)?;
    let passthrough = passthrough_report(&val)?;
    passthrough.write_csv(out.join(PASSTHROUGH_METRICS_FILE))?;

    let baseline = if cfg.baseline_validation {
        let v = validate(&bundle, &val, &sched, &cfg.guidance, &cfg.sampler, cfg.val_seed)?;
        v.report.write_csv(out.join(BASELINE_METRICS_FILE))?;
        log::info!("step 0 validation: {}", ValPoint::from_report(0, &v.report).summary());
        Some(v.report)
    } else {
        None
    };

    let mut records = Vec::new();
    checkpoint(&bundle, out, "initial", &mut records)?;
    let mut opt = AdamW::new(
        bundle.trainable_vars(),
        ParamsAdamW {
            lr: cfg.learning_rate(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut batches = BatchStream::new(train.len(), cfg.seed);
    let mut loss_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1055);
    let snapshots = cfg.snapshots();
    let val_every = cfg.val_interval();
    let mut log = RunLog::default();
    let mut probes = Vec::new();
    let mut last = None;
    let probe = &val[0];

    for step in 1..=cfg.max_steps {
        let started = Instant::now();
        let idx = batches.next(cfg.batch_size);
        let pick = |v: &[Tensor]| Tensor::stack(&idx.iter().map(|&i| &v[i]).collect::<Vec<_>>(), 0);
        let batch = TrainingBatch {
            z0: pick(&cache.z0)?,
            z_cond: pick(&cache.z_cond)?,
            text: pick(&cache.text)?,
        };
        let last_good = records.last().map(|r| r.path.display().to_string()).unwrap_or_default();
        let diverged = |detail: String| Error::Divergence {
            step,
            detail: format!("{detail}; last good checkpoint: {last_good}"),
        };
        let loss = match training_loss(&bundle, &sched, &batch, &cfg.guidance, &mut loss_rng) {
            Ok(l) => l,
            Err(Error::Divergence { detail, .. }) => return Err(diverged(detail)),
            Err(e) => return Err(e),
        };
        opt.backward_step(&loss.loss)?;
        if let Err(e) = bundle.denoiser.store().check_finite() {
            return Err(diverged(format!("parameters became non-finite ({e})")));
        }
        bundle.step = step;
        log.train.push(TrainPoint { step, loss: loss.value });
        log.step_seconds.push(started.elapsed().as_secs_f64());

        if step % val_every == 0 || step == cfg.max_steps {
            let v = validate(&bundle, &val, &sched, &cfg.guidance, &cfg.sampler, cfg.val_seed)?;
            let point = ValPoint::from_report(step, &v.report);
            log::info!("step {step}: train loss {:.5}, {}", loss.value, point.summary());
            log.val.push(point);
            last = Some(v.report);
        }
        if let Some(k) = snapshots.iter().position(|&s| s == step) {
            let stage = Stage::ALL[k];
            checkpoint(&bundle, out, stage.name(), &mut records)?;
            let img = snapshot_probe(&bundle, probe, &sched, cfg)?;
            img.save_png(out.join("snapshots").join(format!("{}.png", stage.name())))?;
            probes.push((stage, step, img));
        }
    }
    checkpoint(&bundle, out, "final", &mut records)?;
    stage_grid(probe, &probes).save_png(out.join("snapshots").join(STAGE_GRID_FILE))?;
    let final_report = last.expect("the last step always validates");
    final_report.write_csv(out.join(FINAL_METRICS_FILE))?;
    log.write(out)?;

    let summary = RunSummary {
        config: cfg.clone(),
        learning_rate: cfg.learning_rate(),
        steps: cfg.max_steps,
        train_images: train.len(),
        val_images: val.len(),
        prompts: prompts.clone(),
        baseline: baseline.as_ref().map(|r| ValPoint::from_report(0, r)),
        final_metrics: ValPoint::from_report(cfg.max_steps, &final_report),
        passthrough: ValPoint::from_report(0, &passthrough),
        checkpoints: records.clone(),
    };
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)?).at(&path)?;

    Ok(RunOutput {
        bundle,
        log,
        baseline,
        final_report,
        passthrough,
        checkpoints: records,
        probes,
        prompts,
    })
}

impl ValPoint {
    fn summary(&self) -> String {
        format!(
            "lab-mse {:.2}, psnr {:.3}, ssim {:.4}, mae {:.3}",
            self.lab_mse, self.psnr, self.ssim, self.mae
        )
    }
}
