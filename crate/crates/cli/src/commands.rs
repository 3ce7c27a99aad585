use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use log::info;
use serde::Serialize;

use colorize_core::colorspace::{to_grayscale, PixelImage};
use colorize_core::data::{
    build_dataset, expand_prompts, load_square, synth, validate_manifest, BuildConfig, DatasetManifest,
    HttpPromptClient, PromptClient, PromptClientConfig, PromptPool, Split,
};
use colorize_core::diffusion::{sample_batch, GuidanceConfig, SamplerConfig, ScheduleConfig};
use colorize_core::metrics::evaluate_pairs;
use colorize_core::model::{
    load_checkpoint, pretrain_autoencoder, save_checkpoint, AutoencoderTrainConfig, ModelBundle, ModelConfig,
    HEADER_FILE,
};
use colorize_core::report::write_run_report;
use colorize_core::sweep::{compare_models, run_sweep, SweepGrid, SweepMode};
use colorize_core::trainer::{finetune, validate, TrainConfig};

use crate::args::*;
use crate::run_manifest::{RunManifest, RUN_MANIFEST_FILE};

/// An invalid invocation detected after argument parsing (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const PROMPTS_FILE: &str = "prompts.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RECONSTRUCTION_FILE: &str = "reconstruction.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BASELINE_METRICS_FILE: &str = "baseline_metrics.csv";
pub const COMPARISON_FILE: &str = "comparison.md";

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Build(a)) => {
            let mut inputs = vec![a.src.clone()];
            inputs.extend(a.prompts.clone());
            execute("dataset build", argv, &a.common, &inputs, false, |m| dataset_build(&a, m))
        }
        Command::Dataset(DatasetCommand::Synth(a)) => {
            execute("dataset synth", argv, &a.common, &[], false, |m| dataset_synth(&a, m))
        }
        Command::Prompts(PromptsCommand::Expand(a)) => {
            execute("prompts expand", argv, &a.common, &[], false, |m| prompts_expand(&a, m))
        }
        Command::Autoencoder(AutoencoderCommand::Pretrain(a)) => {
            let mut inputs = vec![a.manifest.clone()];
            inputs.extend(a.model_config.clone());
            execute("autoencoder pretrain", argv, &a.common, &inputs, false, |m| pretrain(&a, m))
        }
        Command::Finetune(a) => {
            let mut inputs = vec![a.bundle.clone(), a.manifest.clone()];
            inputs.extend(a.train.config.clone());
            execute("finetune", argv, &a.common, &inputs, false, |m| finetune_cmd(&a, m))
        }
        Command::Sample(a) => {
            let mut inputs = vec![a.bundle.clone()];
            inputs.extend(a.input.iter().cloned());
            execute("sample", argv, &a.common, &inputs, false, |m| sample_cmd(&a, m))
        }
        Command::Evaluate(a) => {
            let inputs: Vec<PathBuf> = [&a.pairs, &a.bundle, &a.manifest, &a.baseline, &a.config]
                .into_iter()
                .flatten()
                .cloned()
                .collect();
            execute("evaluate", argv, &a.common, &inputs, false, |m| evaluate_cmd(&a, m))
        }
        Command::Sweep(a) => {
            let mut inputs = vec![a.bundle.clone(), a.manifest.clone()];
            inputs.extend(a.train.config.clone());
            execute("sweep", argv, &a.common, &inputs, a.resume, |m| sweep_cmd(&a, m))
        }
        Command::Report(a) => {
            let inputs = vec![a.run.clone()];
            execute("report", argv, &a.common, &inputs, false, |m| report_cmd(&a, m))
        }
    }
}

/// Prepares the output directory, runs `f` and records the run manifest
/// whether or not `f` succeeded.
fn execute(
    name: &str,
    argv: &[String],
    common: &Common,
    inputs: &[PathBuf],
    resume: bool,
    f: impl FnOnce(&mut RunManifest) -> Result<()>,
) -> Result<()> {
    prepare_out(&common.out, common.force, resume, inputs)?;
    let mut manifest = RunManifest::start(name, argv, common.seed.unwrap_or(0));
    manifest.inputs = inputs.to_vec();
    let result = f(&mut manifest);
    manifest.write(&common.out, result.as_ref().err())?;
    if result.is_ok() {
        info!("{name}: outputs in {}", common.out.display());
    }
    result
}

fn prepare_out(out: &Path, force: bool, resume: bool, inputs: &[PathBuf]) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(usage(format!("output path {} is not a directory", out.display())));
        }
        let occupied = fs::read_dir(out).with_context(|| format!("reading {}", out.display()))?.next().is_some();
        if occupied && !resume {
            if !force {
                return Err(usage(format!(
                    "output directory {} already exists; pass --force to replace it",
                    out.display()
                )));
            }
            if !out.join(RUN_MANIFEST_FILE).exists() {
                return Err(usage(format!(
                    "refusing to replace {}: it was not written by this tool",
                    out.display()
                )));
            }
            let out_abs = fs::canonicalize(out)?;
            for input in inputs {
                if let Ok(abs) = fs::canonicalize(input) {
                    if abs.starts_with(&out_abs) {
                        return Err(usage(format!(
                            "input {} lies inside the output directory {}",
                            input.display(),
                            out.display()
                        )));
                    }
                }
            }
            fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))?;
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Accepts a checkpoint directory, a pretraining output directory or a
/// fine-tuning run directory (which resolves to its final checkpoint).
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    for candidate in [
        path.to_path_buf(),
        path.join(CHECKPOINT_DIR),
        path.join("checkpoints").join("final"),
    ] {
        if candidate.join(HEADER_FILE).exists() {
            return Ok(candidate);
        }
    }
    Err(usage(format!("{} does not contain a model checkpoint", path.display())))
}

fn load_bundle(path: &Path) -> Result<(PathBuf, ModelBundle)> {
    let dir = resolve_checkpoint(path)?;
    let bundle = load_checkpoint(&dir, &Device::Cpu).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok((dir, bundle))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading dataset manifest {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn dataset_build(a: &DatasetBuildArgs, m: &mut RunManifest) -> Result<()> {
    let cfg = BuildConfig {
        image_size: a.image_size,
        val_fraction: a.val_fraction,
        seed: a.common.seed.unwrap_or(0),
    };
    if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
        return Err(usage(format!("--val-fraction {} must lie in (0, 1)", a.val_fraction)));
    }
    let pool = match &a.prompts {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let pool: PromptPool = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            pool.validate()?;
            pool
        }
        None => expand(colorize_core::data::BASE_PROMPT, a.n_prompts)?,
    };
    m.set_config(&serde_json::json!({ "build": cfg, "prompts": pool }))?;
    let built = build_dataset(&a.src, &a.common.out, &cfg, &pool)?;
    write_json(&a.common.out.join(PROMPTS_FILE), &pool)?;
    let violations = validate_manifest(&built.manifest);
    for v in &violations {
        log::error!("{v:?}");
    }
    if !violations.is_empty() {
        bail!("built dataset has {} manifest violations", violations.len());
    }
    info!(
        "{} train / {} val samples, {} skipped",
        built.manifest.count(Split::Train),
        built.manifest.count(Split::Val),
        built.skipped.len()
    );
    m.outputs = vec![built.manifest.manifest_path()];
    Ok(())
}

fn expand(base: &str, n: usize) -> Result<PromptPool> {
    let client = PromptClientConfig::from_env().map(HttpPromptClient::new);
    let pool = match &client {
        Some(c) => {
            info!("expanding prompts through the configured endpoint");
            expand_prompts(base, n, Some((c as &dyn PromptClient, c.retries())))?
        }
        None => expand_prompts(base, n, None)?,
    };
    Ok(pool)
}

fn dataset_synth(a: &DatasetSynthArgs, m: &mut RunManifest) -> Result<()> {
    if a.count == 0 || a.size < 8 {
        return Err(usage("--count must be positive and --size at least 8"));
    }
    let seed = a.common.seed.unwrap_or(0);
    m.set_config(&serde_json::json!({ "count": a.count, "size": a.size, "seed": seed }))?;
    for (i, img) in synth::portraits(a.count, a.size, seed).iter().enumerate() {
        let path = a.common.out.join(format!("portrait_{i:04}.png"));
        img.save_png(&path)?;
        m.outputs.push(path);
    }
    Ok(())
}

fn prompts_expand(a: &PromptsExpandArgs, m: &mut RunManifest) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    m.set_config(&serde_json::json!({ "base": a.base, "n": a.n }))?;
    let pool = expand(&a.base, a.n)?;
    let path = a.common.out.join(PROMPTS_FILE);
    write_json(&path, &pool)?;
    m.outputs.push(path);
    Ok(())
}

fn pretrain(a: &PretrainArgs, m: &mut RunManifest) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let mut model = match &a.model_config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ModelConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ModelConfig::default(),
    };
    model.image_size = manifest.image_size;
    model.validate()?;
    let train_cfg = AutoencoderTrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        kl_weight: a.kl_weight,
        eval_every: a.eval_every,
    };
    let seed = a.common.seed.unwrap_or(0);
    m.set_config(&serde_json::json!({ "model": model, "train": train_cfg, "seed": seed, "dataset": manifest.digest() }))?;
    let targets = |split| -> Result<Vec<PixelImage>> {
        Ok(manifest.load_split(split)?.into_iter().map(|s| s.target).collect())
    };
    let pre = pretrain_autoencoder(&targets(Split::Train)?, &targets(Split::Val)?, &model.autoencoder, &train_cfg, seed, &Device::Cpu)?;
    info!(
        "autoencoder validation MSE {:.5}, LAB-MSE {:.2}, latent scale {:.4}",
        pre.report.final_val_mse, pre.report.final_val_lab_mse, pre.report.latent_scale
    );
    let bundle = ModelBundle::new(model, pre.autoencoder, seed)?;
    let dir = a.common.out.join(CHECKPOINT_DIR);
    save_checkpoint(&bundle, &dir)?;
    let report = a.common.out.join(RECONSTRUCTION_FILE);
    write_json(&report, &pre.report)?;
    m.outputs = vec![dir, report];
    Ok(())
}

fn train_config(o: &TrainOverrides, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = o.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.n_prompts {
        cfg.n_prompts = v;
    }
    if let Some(v) = o.lr_multiplier {
        cfg.lr_multiplier = v;
    }
    if let Some(v) = o.val_every {
        cfg.val_every = Some(v);
    }
    if let Some(v) = &o.snapshot_steps {
        cfg.snapshot_steps = Some([v[0], v[1], v[2]]);
    }
    if let Some(v) = o.sampler_steps {
        cfg.sampler.steps = v;
    }
    if let Some(v) = o.s_text {
        cfg.guidance.s_text = v;
    }
    if let Some(v) = o.s_image {
        cfg.guidance.s_image = v;
    }
    if let Some(v) = o.clip_x0 {
        cfg.sampler.clip_x0 = (v > 0.0).then_some(v);
    }
    if let Some(v) = o.val_seed {
        cfg.val_seed = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finetune_cmd(a: &FinetuneArgs, m: &mut RunManifest) -> Result<()> {
    let cfg = train_config(&a.train, a.common.seed)?;
    m.seed = cfg.seed;
    m.set_config(&cfg)?;
    let manifest = load_manifest(&a.manifest)?;
    let (_, bundle) = load_bundle(&a.bundle)?;
    let out = finetune(bundle, &manifest, &cfg, &a.common.out)?;
    if let Some(b) = &out.baseline {
        info!("step 0: {b}");
    }
    info!("final:  {}", out.final_report);
    info!("passthrough: {}", out.passthrough);
    m.outputs = out.checkpoints.iter().map(|c| a.common.out.join(&c.path)).collect();
    Ok(())
}

#[derive(Serialize)]
struct SampleRecord {
    input: PathBuf,
    output: PathBuf,
    prompt: String,
    seed: u64,
    steps: usize,
    clip_x0: Option<f64>,
    timesteps: usize,
    s_text: f64,
    s_image: f64,
    checkpoint: PathBuf,
    checkpoint_id: String,
    checkpoint_step: usize,
}

fn sample_cmd(a: &SampleArgs, m: &mut RunManifest) -> Result<()> {
    let seed = a.common.seed.unwrap_or(0);
    let guidance = GuidanceConfig {
        s_text: a.s_text,
        s_image: a.s_image,
        ..GuidanceConfig::default()
    };
    guidance.validate()?;
    let schedule = ScheduleConfig {
        timesteps: a.timesteps,
        ..ScheduleConfig::default()
    };
    let sched = schedule.build()?;
    let sampler = SamplerConfig {
        steps: a.steps,
        clip_x0: (a.clip_x0 > 0.0).then_some(a.clip_x0),
    };
    sampler.validate(&sched)?;
    m.set_config(&serde_json::json!({
        "prompt": a.prompt, "sampler": sampler, "guidance": guidance, "schedule": schedule, "seed": seed
    }))?;
    let mut stems = HashSet::new();
    for input in &a.input {
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if !stems.insert(stem.clone()) {
            return Err(usage(format!("two inputs share the file name {stem}")));
        }
    }
    let (dir, bundle) = load_bundle(&a.bundle)?;
    let id = bundle.fingerprint()?;
    let grays = a
        .input
        .iter()
        .map(|p| Ok(to_grayscale(&load_square(p, bundle.config.image_size)?).quantized()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PixelImage> = grays.iter().collect();
    let prompts = vec![a.prompt.as_str(); grays.len()];
    let seeds: Vec<u64> = (0..grays.len() as u64).map(|i| seed + i).collect();
    let images = sample_batch(&bundle, &sched, &refs, &prompts, &guidance, &sampler, &seeds)?;
    for ((input, img), s) in a.input.iter().zip(&images).zip(&seeds) {
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let output = a.common.out.join(format!("{stem}.png"));
        img.save_png(&output)?;
        let record = SampleRecord {
            input: input.clone(),
            output: output.clone(),
            prompt: a.prompt.clone(),
            seed: *s,
            steps: a.steps,
            clip_x0: sampler.clip_x0,
            timesteps: a.timesteps,
            s_text: a.s_text,
            s_image: a.s_image,
            checkpoint: dir.clone(),
            checkpoint_id: id.clone(),
            checkpoint_step: bundle.step,
        };
        write_json(&a.common.out.join(format!("{stem}.json")), &record)?;
        m.outputs.push(output);
    }
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, m: &mut RunManifest) -> Result<()> {
    let out = &a.common.out;
    let metrics_path = out.join(METRICS_FILE);
    if let Some(pairs) = &a.pairs {
        m.set_config(&serde_json::json!({ "pairs": pairs }))?;
        let report = evaluate_pairs(pairs)?;
        info!("{report}");
        report.write_csv(&metrics_path)?;
        m.outputs.push(metrics_path);
        return Ok(());
    }
    let (Some(bundle_path), Some(manifest_path)) = (&a.bundle, &a.manifest) else {
        return Err(usage("pass either --pairs or --bundle with --manifest"));
    };
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.common.seed {
        cfg.val_seed = seed;
    }
    m.seed = cfg.val_seed;
    m.set_config(&serde_json::json!({ "schedule": cfg.schedule, "guidance": cfg.guidance, "sampler": cfg.sampler, "val_seed": cfg.val_seed }))?;
    let manifest = load_manifest(manifest_path)?;
    let val = manifest.load_split(Split::Val)?;
    let (_, tuned) = load_bundle(bundle_path)?;
    if tuned.config.image_size != manifest.image_size {
        return Err(usage(format!(
            "checkpoint expects {}px images but the dataset has {}px",
            tuned.config.image_size, manifest.image_size
        )));
    }
    match &a.baseline {
        Some(baseline_path) => {
            let (_, baseline) = load_bundle(baseline_path)?;
            let cmp = compare_models(&baseline, &tuned, &val, &cfg)?;
            info!("baseline: {}", cmp.baseline);
            info!("tuned:    {}", cmp.tuned);
            cmp.tuned.write_csv(&metrics_path)?;
            let baseline_csv = out.join(BASELINE_METRICS_FILE);
            cmp.baseline.write_csv(&baseline_csv)?;
            let md = out.join(COMPARISON_FILE);
            fs::write(&md, cmp.to_markdown()).with_context(|| format!("writing {}", md.display()))?;
            m.outputs.extend([metrics_path, baseline_csv, md]);
        }
        None => {
            let sched = cfg.schedule.build()?;
            let v = validate(&tuned, &val, &sched, &cfg.guidance, &cfg.sampler, cfg.val_seed)?;
            info!("{}", v.report);
            v.report.write_csv(&metrics_path)?;
            let images = out.join("images");
            fs::create_dir_all(&images)?;
            for (sample, img) in val.iter().zip(&v.images) {
                img.save_png(images.join(format!("{}.png", sample.name)))?;
            }
            m.outputs.extend([metrics_path, images]);
        }
    }
    Ok(())
}

fn sweep_cmd(a: &SweepArgs, m: &mut RunManifest) -> Result<()> {
    let base = train_config(&a.train, a.common.seed)?;
    let grid = SweepGrid {
        lr_ratios: a.lr_ratios.clone(),
        batch_sizes: a.batch_sizes.clone(),
        prompt_counts: a.prompt_counts.clone(),
        mode: match a.mode {
            ModeArg::OneFactor => SweepMode::OneFactorAtATime,
            ModeArg::FullCross => SweepMode::FullCross,
        },
    };
    grid.validate()?;
    m.seed = base.seed;
    m.set_config(&serde_json::json!({ "grid": grid, "base": base }))?;
    let manifest = load_manifest(&a.manifest)?;
    let (_, bundle) = load_bundle(&a.bundle)?;
    let result = run_sweep(&grid, &base, &manifest, &bundle, &a.common.out)?;
    let failed = result.arms.iter().filter(|r| r.error.is_some()).count();
    info!("{} arms, {failed} failed", result.arms.len());
    m.outputs = vec![
        a.common.out.join(colorize_core::sweep::SUMMARY_CSV),
        a.common.out.join(colorize_core::sweep::SUMMARY_MD),
    ];
    if failed == result.arms.len() {
        bail!("every sweep arm failed");
    }
    Ok(())
}

fn report_cmd(a: &ReportArgs, m: &mut RunManifest) -> Result<()> {
    m.set_config(&serde_json::json!({ "run": a.run }))?;
    let files = write_run_report(&a.run, &a.common.out).with_context(|| format!("reporting on {}", a.run.display()))?;
    m.outputs = vec![files.loss_curve, files.markdown];
    m.outputs.extend(files.stage_grid);
    Ok(())
}
