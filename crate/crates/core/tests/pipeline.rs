use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use colorize_core::colorspace::PixelImage;
use colorize_core::data::{
    build_dataset, expand_prompts, synth, validate_manifest, BuildConfig, DatasetManifest, Rule, Split, BASE_PROMPT,
};
use colorize_core::diffusion::SamplerConfig;
use colorize_core::metrics::MetricsReport;
use colorize_core::model::{load_checkpoint, Autoencoder, CheckpointHeader, Component, ModelBundle, ModelConfig, ParamStore};
use colorize_core::sweep::{run_sweep, ArmStatus, Axis, SweepGrid, SweepMode};
use colorize_core::trainer::{
    finetune, snapshot_probe, RunLog, RunSummary, Stage, TrainConfig, FINAL_METRICS_FILE, TRAIN_LOG_FILE, VAL_LOG_FILE,
};
use proptest::prelude::*;
use tempfile::TempDir;

fn dataset(n: usize, size: usize, seed: u64) -> (TempDir, DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir_all(&src).unwrap();
    for (i, img) in synth::portraits(n, size, seed).iter().enumerate() {
        img.save_png(src.join(format!("p{i:03}.png"))).unwrap();
    }
    let pool = expand_prompts(BASE_PROMPT, 3, None).unwrap();
    let cfg = BuildConfig {
        image_size: size,
        val_fraction: 0.25,
        seed,
    };
    let m = build_dataset(&src, dir.path().join("data"), &cfg, &pool).unwrap().manifest;
    (dir, m)
}

fn micro_bundle() -> ModelBundle {
    let cfg = ModelConfig::micro();
    let ae = Autoencoder::new(&cfg.autoencoder, ParamStore::seeded(1, false), 1.0, DType::F32, &Device::Cpu).unwrap();
    ModelBundle::new(cfg, ae, 4).unwrap()
}

fn micro_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        n_prompts: 3,
        max_steps: 12,
        val_every: Some(6),
        sampler: SamplerConfig::with_steps(4),
        ..Default::default()
    }
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path).unwrap()
}

#[test]
fn built_dataset_satisfies_the_contract() {
    let (_dir, m) = dataset(24, 16, 5);
    assert!(validate_manifest(&m).is_empty());
    assert_eq!(m.count(Split::Val), 6);
    assert!(m.split(Split::Val).all(|s| s.prompt == BASE_PROMPT));
    assert!(m.split(Split::Train).all(|s| s.prompt != BASE_PROMPT));
    let reloaded = DatasetManifest::load(m.manifest_path()).unwrap();
    assert_eq!(reloaded.digest(), m.digest());
}

#[test]
fn dataset_build_is_deterministic() {
    let (_a, m1) = dataset(16, 16, 3);
    let (_b, m2) = dataset(16, 16, 3);
    assert_eq!(m1.digest(), m2.digest());
    for (s1, s2) in m1.samples.iter().zip(&m2.samples) {
        assert_eq!(read(m1.resolve(&s1.input_path)), read(m2.resolve(&s2.input_path)));
        assert_eq!(read(m1.resolve(&s1.target_path)), read(m2.resolve(&s2.target_path)));
    }
}

#[test]
fn tampering_is_detected() {
    let (_dir, mut m) = dataset(16, 16, 2);
    let val = m.samples.iter().position(|s| s.split == Split::Val).unwrap();
    m.samples[val].prompt = "paint it".into();
    let train = m.samples.iter().position(|s| s.split == Split::Train).unwrap();
    m.samples[train].prompt = BASE_PROMPT.into();
    // A color input no longer pairs with its target.
    let other = m.samples.iter().rposition(|s| s.split == Split::Train).unwrap();
    let target = PixelImage::load(m.resolve(&m.samples[other].target_path)).unwrap();
    target.save_png(m.resolve(&m.samples[other].input_path)).unwrap();
    let rules: Vec<Rule> = validate_manifest(&m).iter().map(|v| v.rule).collect();
    assert!(rules.contains(&Rule::ValPrompt));
    assert!(rules.contains(&Rule::TrainPrompt));
    assert!(rules.contains(&Rule::GrayscalePairing));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn offline_prompt_pools_are_distinct(n in 1usize..=30) {
        let pool = expand_prompts(BASE_PROMPT, n, None).unwrap();
        prop_assert_eq!(pool.len(), n);
        let mut seen = std::collections::HashSet::new();
        for p in &pool.train_prompts {
            prop_assert!(seen.insert(p.to_lowercase()));
            prop_assert_ne!(p.as_str(), BASE_PROMPT);
        }
    }
}

#[test]
fn finetune_freezes_encoders_and_is_reproducible() {
    let (dir, m) = dataset(24, 16, 5);
    let cfg = micro_config();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = finetune(micro_bundle(), &m, &cfg, &a).unwrap();
    finetune(micro_bundle(), &m, &cfg, &b).unwrap();

    for f in [TRAIN_LOG_FILE, VAL_LOG_FILE, FINAL_METRICS_FILE] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs between identical runs");
    }
    let log = RunLog::read(&a).unwrap();
    assert_eq!(log.train.len(), 12);
    assert_eq!(log.val.iter().map(|v| v.step).collect::<Vec<_>>(), vec![6, 12]);

    // Frozen components are byte-identical; the denoiser moved.
    let initial = a.join("checkpoints/initial");
    let last = a.join("checkpoints/final");
    let header = CheckpointHeader::read(&initial).unwrap();
    let (mut same, mut total) = (0, 0);
    for t in &header.tensors {
        let (x, y) = (read(initial.join(&t.file)), read(last.join(&t.file)));
        match t.component {
            Component::Autoencoder | Component::TextEncoder => assert_eq!(x, y, "{} changed", t.file),
            Component::Denoiser => {
                for (p, q) in x.chunks_exact(4).zip(y.chunks_exact(4)) {
                    total += 1;
                    same += usize::from(p == q);
                }
            }
        }
    }
    assert!(total > 0 && same * 100 < total, "{same} of {total} denoiser scalars unchanged");

    // Reloading the final checkpoint reproduces the final metrics exactly.
    let reloaded = load_checkpoint(&last, &Device::Cpu).unwrap();
    assert_eq!(reloaded.step, 12);
    let val = m.load_split(Split::Val).unwrap();
    let sched = cfg.schedule.build().unwrap();
    let again = colorize_core::trainer::validate(&reloaded, &val, &sched, &cfg.guidance, &cfg.sampler, cfg.val_seed)
        .unwrap()
        .report;
    assert_eq!(again, run.final_report);
    assert_eq!(MetricsReport::read_csv(a.join(FINAL_METRICS_FILE)).unwrap(), run.final_report);

    // The late snapshot regenerates from its checkpoint.
    let late = load_checkpoint(a.join("checkpoints/late"), &Device::Cpu).unwrap();
    let probe = snapshot_probe(&late, &val[0], &sched, &cfg).unwrap();
    let saved = PixelImage::load(a.join(format!("snapshots/{}.png", Stage::Late.name()))).unwrap();
    assert_eq!(probe.quantized(), saved);

    let summary = RunSummary::read(&a).unwrap();
    assert_eq!(summary.steps, 12);
    assert_eq!(summary.checkpoints.len(), 5);
}

#[test]
fn finetune_checks_freeze_flags_and_sizes() {
    let (dir, m) = dataset(16, 16, 1);
    let cfg = ModelConfig::micro();
    let trainable = Autoencoder::new(&cfg.autoencoder, ParamStore::seeded(1, true), 1.0, DType::F32, &Device::Cpu).unwrap();
    let bundle = ModelBundle::new(cfg, trainable, 4).unwrap();
    assert!(!bundle.store(Component::Autoencoder).is_trainable());
    let mut unfrozen = bundle.deep_clone().unwrap();
    unfrozen.freeze.text_encoder = false;
    assert!(finetune(unfrozen, &m, &micro_config(), dir.path().join("a")).is_err());
    let mut frozen = bundle.deep_clone().unwrap();
    frozen.freeze.denoiser = true;
    assert!(finetune(frozen, &m, &micro_config(), dir.path().join("b")).is_err());
    let (_other, big) = dataset(16, 32, 1);
    assert!(finetune(bundle, &big, &micro_config(), dir.path().join("c")).is_err());
}

#[test]
fn config_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    fs::write(&path, "max_steps = 30\nbatch_size = 2\n[sampler]\nsteps = 10\n").unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!((cfg.max_steps, cfg.batch_size, cfg.sampler.steps), (30, 2, 10));
    assert_eq!(cfg.sampler.clip_x0, SamplerConfig::default().clip_x0);
    assert_eq!(cfg.snapshots(), [6, 15, 30]);
    let json = dir.path().join("cfg.json");
    fs::write(&json, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(TrainConfig::load(&json).unwrap(), cfg);
    fs::write(&path, "max_steps = 0\n").unwrap();
    assert!(TrainConfig::load(&path).is_err());
}

#[test]
fn sweep_records_failures_and_resumes() {
    let (dir, m) = dataset(24, 16, 5);
    let base = TrainConfig {
        max_steps: 6,
        val_every: Some(6),
        baseline_validation: false,
        ..micro_config()
    };
    let grid = SweepGrid {
        lr_ratios: vec![1e12],
        batch_sizes: vec![2],
        prompt_counts: vec![1],
        mode: SweepMode::OneFactorAtATime,
    };
    let out = dir.path().join("sweep");
    let first = run_sweep(&grid, &base, &m, &micro_bundle(), &out).unwrap();
    assert_eq!(first.arms.len(), 4);
    let diverged = first.arms.iter().find(|a| a.spec.axes == [Axis::LearningRate]).unwrap();
    assert_eq!(diverged.status, ArmStatus::Failed, "{:?}", diverged.error);
    assert!(first
        .arms
        .iter()
        .filter(|a| a.spec.axes != [Axis::LearningRate])
        .all(|a| a.status == ArmStatus::Completed && a.metrics.is_some()));
    assert!(out.join("grids/batch_size.png").exists());

    let second = run_sweep(&grid, &base, &m, &micro_bundle(), &out).unwrap();
    assert_eq!(first, second);
}
