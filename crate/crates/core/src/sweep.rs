//! Hyperparameter sweeps over learning rate, batch size and prompt-pool
//! size, plus two-model comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::colorspace::PixelImage;
use crate::data::{DatasetManifest, LoadedSample, Split};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{fmt_metric, MetricsReport};
use crate::model::ModelBundle;
use crate::raster::{labeled_row, upscale};
use crate::trainer::{finetune, validate, TrainConfig, ValPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    OneFactorAtATime,
    FullCross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    LearningRate,
    BatchSize,
    Prompts,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::LearningRate, Axis::BatchSize, Axis::Prompts];

    pub fn name(self) -> &'static str {
        match self {
            Axis::LearningRate => "learning_rate",
            Axis::BatchSize => "batch_size",
            Axis::Prompts => "prompts",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    /// Multipliers of the base reference learning rate.
    pub lr_ratios: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub prompt_counts: Vec<usize>,
    pub mode: SweepMode,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lr_ratios: vec![2.0, 1.0, 0.2],
            batch_sizes: vec![2, 4, 8],
            prompt_counts: vec![1, 30],
            mode: SweepMode::OneFactorAtATime,
        }
    }
}

/// One configuration to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub id: String,
    pub label: String,
    /// Axes on which this arm differs from the base configuration.
    pub axes: Vec<Axis>,
    pub lr_ratio: f64,
    pub config: TrainConfig,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.lr_ratios.is_empty() || self.batch_sizes.is_empty() || self.prompt_counts.is_empty() {
            return Err(Error::InvalidArgument("sweep axes must be non-empty".into()));
        }
        if self.lr_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0))
            || self.batch_sizes.contains(&0)
            || self.prompt_counts.contains(&0)
        {
            return Err(Error::InvalidArgument("sweep values must be positive".into()));
        }
        Ok(())
    }

    /// The distinct arms, base configuration first.
    pub fn arms(&self, base: &TrainConfig, manifest_digest: &str) -> Result<Vec<ArmSpec>> {
        self.validate()?;
        base.validate()?;
        let mut points: Vec<(f64, usize, usize)> = Vec::new();
        match self.mode {
            SweepMode::OneFactorAtATime => {
                points.push((1.0, base.batch_size, base.n_prompts));
                points.extend(self.lr_ratios.iter().map(|&r| (r, base.batch_size, base.n_prompts)));
                points.extend(self.batch_sizes.iter().map(|&b| (1.0, b, base.n_prompts)));
                points.extend(self.prompt_counts.iter().map(|&p| (1.0, base.batch_size, p)));
            }
            SweepMode::FullCross => {
                for &r in &self.lr_ratios {
                    for &b in &self.batch_sizes {
                        for &p in &self.prompt_counts {
                            points.push((r, b, p));
                        }
                    }
                }
            }
        }
        let mut arms: Vec<ArmSpec> = Vec::new();
        for (r, b, p) in points {
            let config = TrainConfig {
                reference_learning_rate: base.reference_learning_rate * r,
                batch_size: b,
                n_prompts: p,
                ..base.clone()
            };
            let id = arm_id(&config, manifest_digest)?;
            if arms.iter().any(|a| a.id == id) {
                continue;
            }
            let mut axes = Vec::new();
            let mut parts = Vec::new();
            if r != 1.0 {
                axes.push(Axis::LearningRate);
                parts.push(format!("lr x{r}"));
            }
            if b != base.batch_size {
                axes.push(Axis::BatchSize);
                parts.push(format!("batch {b}"));
            }
            if p != base.n_prompts {
                axes.push(Axis::Prompts);
                parts.push(format!("prompts {p}"));
            }
            let label = if parts.is_empty() { "base".to_string() } else { parts.join(", ") };
            arms.push(ArmSpec {
                id,
                label,
                axes,
                lr_ratio: r,
                config,
            });
        }
        Ok(arms)
    }
}

/// Stable identity of a run: hash of its configuration (which includes the
/// seed) and a digest of its inputs (manifest, and in [`run_sweep`] also the
/// starting model).
pub fn arm_id(config: &TrainConfig, manifest_digest: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(config.seed.to_le_bytes());
    h.update(manifest_digest.as_bytes());
    Ok(hex::encode(&h.finalize()[..8]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub spec: ArmSpec,
    pub status: ArmStatus,
    pub error: Option<String>,
    pub metrics: Option<ValPoint>,
    /// Relative to the sweep directory.
    pub probe: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub arms: Vec<ArmResult>,
    pub baseline_arm: String,
}

pub const ARM_RESULT_FILE: &str = "arm.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_MD: &str = "summary.md";

/// Runs every arm of `grid` around `base`, each a seeded fine-tune of a
/// fresh copy of `bundle` followed by validation. Arms whose `arm.json`
/// already exists under `out/arms/<id>` are loaded instead of re-run; a
/// failing arm is recorded and the sweep continues.
pub fn run_sweep(
    grid: &SweepGrid,
    base: &TrainConfig,
    manifest: &DatasetManifest,
    bundle: &ModelBundle,
    out: impl AsRef<Path>,
) -> Result<SweepResult> {
    let out = out.as_ref();
    let specs = grid.arms(base, &format!("{}:{}", manifest.digest(), bundle.fingerprint()?))?;
    fs::create_dir_all(out.join("arms")).at(out)?;
    let mut arms = Vec::with_capacity(specs.len());
    for spec in specs {
        let rel = PathBuf::from("arms").join(&spec.id);
        let dir = out.join(&rel);
        let record = dir.join(ARM_RESULT_FILE);
        if record.exists() {
            let done: ArmResult = serde_json::from_str(&fs::read_to_string(&record).at(&record)?)?;
            if done.status == ArmStatus::Completed {
                log::info!("arm {} ({}) already complete", spec.id, spec.label);
                arms.push(done);
                continue;
            }
        }
        log::info!("running arm {} ({})", spec.id, spec.label);
        let result = match bundle.deep_clone().and_then(|b| finetune(b, manifest, &spec.config, &dir)) {
            Ok(run) => {
                run.final_report.write_csv(dir.join("metrics.csv"))?;
                let probe = run.probes.last().map(|(_, _, img)| img.clone());
                let probe_rel = match probe {
                    Some(img) => {
                        img.save_png(dir.join("probe.png"))?;
                        Some(rel.join("probe.png"))
                    }
                    None => None,
                };
                ArmResult {
                    metrics: Some(ValPoint {
                        step: spec.config.max_steps,
                        lab_mse: run.final_report.lab_mse,
                        psnr: run.final_report.psnr_db,
                        ssim: run.final_report.ssim,
                        mae: run.final_report.mae,
                    }),
                    spec,
                    status: ArmStatus::Completed,
                    error: None,
                    probe: probe_rel,
                }
            }
            Err(e) => {
                log::warn!("arm {} ({}) failed: {e}", spec.id, spec.label);
                fs::create_dir_all(&dir).at(&dir)?;
                ArmResult {
                    spec,
                    status: ArmStatus::Failed,
                    error: Some(e.to_string()),
                    metrics: None,
                    probe: None,
                }
            }
        };
        fs::write(&record, serde_json::to_string_pretty(&result)?).at(&record)?;
        arms.push(result);
    }
    let result = SweepResult {
        baseline_arm: arms[0].spec.id.clone(),
        arms,
    };
    write_summaries(&result, out)?;
    let val = manifest.load_split(Split::Val)?;
    if let Some(probe) = val.first() {
        for axis in Axis::ALL {
            if let Some(grid_img) = axis_grid(&result, axis, probe, out)? {
                grid_img.save_png(out.join("grids").join(format!("{}.png", axis.name())))?;
            }
        }
    }
    Ok(result)
}

/// Probe colorizations of the base arm and every arm varying only `axis`,
/// between the probe's input and target. `None` when the axis has no arms.
pub fn axis_grid(result: &SweepResult, axis: Axis, probe: &LoadedSample, root: &Path) -> Result<Option<PixelImage>> {
    let members: Vec<&ArmResult> = result
        .arms
        .iter()
        .filter(|a| a.spec.axes.is_empty() || a.spec.axes == [axis])
        .collect();
    if members.iter().all(|a| a.spec.axes.is_empty()) {
        return Ok(None);
    }
    let k = if probe.input.width() < 96 { 2 } else { 1 };
    let mut panels: Vec<(String, PixelImage)> = vec![("input".into(), upscale(&probe.input, k))];
    for a in members {
        if let Some(p) = &a.probe {
            let label = match axis {
                Axis::LearningRate => format!("lr {:.0e}", a.spec.config.reference_learning_rate),
                Axis::BatchSize => format!("batch {}", a.spec.config.batch_size),
                Axis::Prompts => format!("prompts {}", a.spec.config.n_prompts),
            };
            panels.push((label, upscale(&PixelImage::load(root.join(p))?, k)));
        }
    }
    panels.push(("target".into(), upscale(&probe.target, k)));
    let refs: Vec<(String, &PixelImage)> = panels.iter().map(|(l, i)| (l.clone(), i)).collect();
    Ok(Some(labeled_row(&refs, 1)))
}

fn write_summaries(result: &SweepResult, out: &Path) -> Result<()> {
    let mut csv = String::from("arm,label,reference_learning_rate,learning_rate,batch_size,n_prompts,status,lab_mse,psnr_db,ssim,mae\n");
    let mut md = String::from(
        "| Arm | Setting | LR (reference) | LR (used) | Batch | Prompts | LAB-MSE | PSNR | SSIM | MAE |\n|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for a in &result.arms {
        let c = &a.spec.config;
        let m = a.metrics.map(|m| [m.lab_mse, m.psnr, m.ssim, m.mae].map(fmt_metric));
        let cells = m.clone().unwrap_or_else(|| std::array::from_fn(|_| String::new()));
        let _ = writeln!(
            csv,
            "{},{},{:e},{:e},{},{},{},{}",
            a.spec.id,
            a.spec.label.replace(',', ";"),
            c.reference_learning_rate,
            c.learning_rate(),
            c.batch_size,
            c.n_prompts,
            if a.status == ArmStatus::Completed { "completed" } else { "failed" },
            cells.join(",")
        );
        let shown = match (&m, &a.error) {
            (Some(_), _) => {
                let m = a.metrics.unwrap();
                [format!("{:.2}", m.lab_mse), format!("{:.4}", m.psnr), format!("{:.4}", m.ssim), format!("{:.4}", m.mae)]
            }
            (None, Some(e)) => [format!("failed: {e}"), String::new(), String::new(), String::new()],
            _ => Default::default(),
        };
        let _ = writeln!(
            md,
            "| `{}` | {} | {:.0e} | {:.0e} | {} | {} | {} |",
            a.spec.id,
            a.spec.label,
            c.reference_learning_rate,
            c.learning_rate(),
            c.batch_size,
            c.n_prompts,
            shown.join(" | ")
        );
    }
    for (name, body) in [(SUMMARY_CSV, csv), (SUMMARY_MD, md)] {
        let path = out.join(name);
        fs::write(&path, body).at(&path)?;
    }
    Ok(())
}

/// Validation metrics of two models on the same samples and noise seeds.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub baseline_name: String,
    pub tuned_name: String,
    pub baseline: MetricsReport,
    pub tuned: MetricsReport,
}

/// Validates both bundles on `val` with identical settings.
pub fn compare_models(
    baseline: &ModelBundle,
    tuned: &ModelBundle,
    val: &[LoadedSample],
    cfg: &TrainConfig,
) -> Result<Comparison> {
    if baseline.config != tuned.config {
        return Err(Error::Checkpoint("the two checkpoints have different model configurations".into()));
    }
    let sched = cfg.schedule.build()?;
    let run = |b: &ModelBundle| validate(b, val, &sched, &cfg.guidance, &cfg.sampler, cfg.val_seed);
    Ok(Comparison {
        baseline_name: format!("Before fine-tuning (step {})", baseline.step),
        tuned_name: format!("Fine-tuned (step {})", tuned.step),
        baseline: run(baseline)?.report,
        tuned: run(tuned)?.report,
    })
}

type Column = (&'static str, fn(&MetricsReport) -> f64, bool);

impl Comparison {
    /// Two-row table; the better value in each column is bold, and nothing
    /// is bold when the two are equal.
    pub fn to_markdown(&self) -> String {
        // (header, value, higher is better)
        let cols: [Column; 4] = [
            ("PSNR ↑", |r| r.psnr_db, true),
            ("SSIM ↑", |r| r.ssim, true),
            ("MAE ↓", |r| r.mae, false),
            ("LAB-MSE ↓", |r| r.lab_mse, false),
        ];
        let mut s = String::from("| Model |");
        for (name, _, _) in &cols {
            let _ = write!(s, " {name} |");
        }
        s.push_str("\n|---|---|---|---|---|\n");
        for (name, me, other) in [
            (&self.baseline_name, &self.baseline, &self.tuned),
            (&self.tuned_name, &self.tuned, &self.baseline),
        ] {
            let _ = write!(s, "| {name} |");
            for (_, get, higher) in &cols {
                let (a, b) = (get(me), get(other));
                let wins = if *higher { a > b } else { a < b };
                let text = if a.is_finite() { format!("{a:.4}") } else { fmt_metric(a) };
                if wins {
                    let _ = write!(s, " **{text}** |");
                } else {
                    let _ = write!(s, " {text} |");
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_six_arms() {
        let base = TrainConfig::default();
        let arms = SweepGrid::default().arms(&base, "d").unwrap();
        assert_eq!(arms.len(), 6);
        assert_eq!(arms[0].label, "base");
        let labels: Vec<&str> = arms.iter().map(|a| a.label.as_str()).collect();
        assert_eq!(labels, ["base", "lr x2", "lr x0.2", "batch 2", "batch 8", "prompts 1"]);
        let ids: std::collections::HashSet<_> = arms.iter().map(|a| a.id.clone()).collect();
        assert_eq!(ids.len(), 6);
        assert!((arms[1].config.reference_learning_rate - 1e-5).abs() < 1e-20);
        assert!((arms[2].config.reference_learning_rate - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn full_cross_counts() {
        let grid = SweepGrid {
            mode: SweepMode::FullCross,
            ..Default::default()
        };
        assert_eq!(grid.arms(&TrainConfig::default(), "d").unwrap().len(), 18);
    }

    #[test]
    fn arm_id_depends_on_config_seed_and_data() {
        let c = TrainConfig::default();
        let a = arm_id(&c, "x").unwrap();
        assert_eq!(a, arm_id(&c, "x").unwrap());
        assert_ne!(a, arm_id(&c, "y").unwrap());
        assert_ne!(a, arm_id(&TrainConfig { seed: 1, ..c.clone() }, "x").unwrap());
    }

    #[test]
    fn empty_axis_rejected() {
        let grid = SweepGrid {
            batch_sizes: vec![],
            ..Default::default()
        };
        assert!(grid.arms(&TrainConfig::default(), "d").is_err());
    }

    #[test]
    fn self_comparison_has_no_winner() {
        let row = crate::metrics::ImageMetrics {
            image: "a".into(),
            psnr_db: 20.0,
            ssim: 0.5,
            mae: 10.0,
            lab_mse: 100.0,
        };
        let r = MetricsReport::from_rows(vec![row.clone()]).unwrap();
        let c = Comparison {
            baseline_name: "a".into(),
            tuned_name: "b".into(),
            baseline: r.clone(),
            tuned: r.clone(),
        };
        assert!(!c.to_markdown().contains("**"));
        let better = MetricsReport::from_rows(vec![crate::metrics::ImageMetrics { psnr_db: 21.0, mae: 12.0, ..row }]).unwrap();
        let c = Comparison { tuned: better, ..c };
        let md = c.to_markdown();
        assert!(md.contains("**21.0000**"), "{md}");
        assert!(md.contains("**10.0000**"), "{md}");
        assert_eq!(md.matches("**").count(), 4);
    }
}
