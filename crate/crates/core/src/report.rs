//! Run reports: loss curves and the before/after comparison table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::colorspace::PixelImage;
use crate::error::{IoContext, Result};
use crate::metrics::MetricsReport;
use crate::raster::{Canvas, Rgb, BLACK, BLUE, GRAY, ORANGE, WHITE};
use crate::sweep::Comparison;
use crate::trainer::{
    RunLog, RunSummary, BASELINE_METRICS_FILE, FINAL_METRICS_FILE, PASSTHROUGH_METRICS_FILE, STAGE_GRID_FILE,
};

pub const LOSS_CURVE_FILE: &str = "loss_curve.png";
pub const REPORT_FILE: &str = "report.md";

/// Reference numbers from the original large-scale fine-tuning
/// (before, after), shown for context only.
pub const REFERENCE_PSNR: (f64, f64) = (19.7804, 19.9019);
pub const REFERENCE_SSIM: (f64, f64) = (0.4301, 0.5348);
pub const REFERENCE_MAE: (f64, f64) = (22.1093, 21.3045);

struct Panel {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Panel {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0).max(1e-12);
        let fy = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0).max(1e-12);
        (self.x + fx * self.w, self.y + self.h - fy * self.h)
    }

    fn frame(&self, c: &mut Canvas, title: &str, x_label: &str) {
        let (x0, y0, x1, y1) = (self.x, self.y, self.x + self.w, self.y + self.h);
        c.draw_line(x0, y1, x1, y1, BLACK);
        c.draw_line(x0, y0, x0, y1, BLACK);
        c.draw_text(x0 as i64, y0 as i64 - 14, title, 2, BLACK);
        let fmt = |v: f64| if v.abs() >= 100.0 { format!("{v:.0}") } else { format!("{v:.3}") };
        c.draw_text(x0 as i64 - 4 - Canvas::text_width(&fmt(self.y_range.1), 1) as i64, y0 as i64, &fmt(self.y_range.1), 1, BLACK);
        c.draw_text(x0 as i64 - 4 - Canvas::text_width(&fmt(self.y_range.0), 1) as i64, y1 as i64 - 5, &fmt(self.y_range.0), 1, BLACK);
        c.draw_text(x0 as i64, y1 as i64 + 4, &format!("{:.0}", self.x_range.0), 1, BLACK);
        let right = format!("{:.0}", self.x_range.1);
        c.draw_text(x1 as i64 - Canvas::text_width(&right, 1) as i64, y1 as i64 + 4, &right, 1, BLACK);
        c.draw_text((x0 + self.w / 2.0) as i64 - Canvas::text_width(x_label, 1) as i64 / 2, y1 as i64 + 4, x_label, 1, BLACK);
    }

    fn polyline(&self, c: &mut Canvas, pts: &[(f64, f64)], color: Rgb) {
        for w in pts.windows(2) {
            let (a, b) = (self.map(w[0].0, w[0].1), self.map(w[1].0, w[1].1));
            c.draw_line(a.0, a.1, b.0, b.1, color);
        }
        if pts.len() == 1 {
            let (x, y) = self.map(pts[0].0, pts[0].1);
            c.fill_rect(x as i64 - 1, y as i64 - 1, 3, 3, color);
        }
    }

    fn hline(&self, c: &mut Canvas, y: f64, color: Rgb) {
        let (_, py) = self.map(self.x_range.0, y);
        let mut x = self.x;
        while x < self.x + self.w {
            c.draw_line(x, py, (x + 4.0).min(self.x + self.w), py, color);
            x += 8.0;
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    let mut sum = 0.0;
    for i in 0..v.len() {
        sum += v[i];
        if i >= window {
            sum -= v[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Training loss (raw and smoothed) above validation LAB-MSE. Optional
/// horizontal references: the step-0 model and grayscale passthrough.
pub fn loss_curve(log: &RunLog, baseline_lab: Option<f64>, passthrough_lab: Option<f64>) -> PixelImage {
    let (w, h) = (560usize, 440usize);
    let mut c = Canvas::new(w, h, WHITE);
    let last_step = log.train.last().map(|p| p.step).unwrap_or(1).max(1) as f64;
    let losses: Vec<f64> = log.train.iter().map(|p| p.loss).collect();
    let smooth = moving_average(&losses, (losses.len() / 40).max(1));
    let top = Panel {
        x: 70.0,
        y: 30.0,
        w: w as f64 - 100.0,
        h: 150.0,
        x_range: (0.0, last_step),
        y_range: range(losses.iter().copied()),
    };
    top.frame(&mut c, "training loss", "step");
    let raw: Vec<(f64, f64)> = log.train.iter().map(|p| (p.step as f64, p.loss)).collect();
    top.polyline(&mut c, &raw, [0.7, 0.8, 0.95]);
    let sm: Vec<(f64, f64)> = log.train.iter().zip(&smooth).map(|(p, s)| (p.step as f64, *s)).collect();
    top.polyline(&mut c, &sm, BLUE);

    let refs: Vec<f64> = baseline_lab.into_iter().chain(passthrough_lab).collect();
    let bottom = Panel {
        x: 70.0,
        y: 250.0,
        w: w as f64 - 100.0,
        h: 150.0,
        x_range: (0.0, last_step),
        y_range: range(log.val.iter().map(|p| p.lab_mse).chain(refs.iter().copied())),
    };
    bottom.frame(&mut c, "validation lab-mse", "step");
    if let Some(b) = baseline_lab {
        bottom.hline(&mut c, b, GRAY);
    }
    if let Some(p) = passthrough_lab {
        bottom.hline(&mut c, p, ORANGE);
    }
    let val: Vec<(f64, f64)> = log.val.iter().map(|p| (p.step as f64, p.lab_mse)).collect();
    bottom.polyline(&mut c, &val, BLUE);
    c.draw_text(70, h as i64 - 18, "gray dashes: step 0   orange dashes: grayscale input", 1, BLACK);
    c.into_image()
}

fn reference_footnote() -> String {
    format!(
        "Reference values from the original large-scale experiment (a pretrained \
         instruction-following editor fine-tuned on 766 face photographs), before → after: \
         PSNR {:.4} → {:.4}, SSIM {:.4} → {:.4}, MAE {:.4} → {:.4}. They are context, not \
         targets: this model is trained from scratch at a much smaller scale on different data.",
        REFERENCE_PSNR.0, REFERENCE_PSNR.1, REFERENCE_SSIM.0, REFERENCE_SSIM.1, REFERENCE_MAE.0, REFERENCE_MAE.1
    )
}

/// Markdown report for a comparison plus optional run context.
pub fn report_markdown(cmp: &Comparison, passthrough: Option<&MetricsReport>, summary: Option<&RunSummary>) -> String {
    let mut s = String::from("# Colorization run report\n\n## Validation metrics\n\n");
    s.push_str(&cmp.to_markdown());
    s.push_str("\nBold marks the better value in each column. PSNR, SSIM and MAE are computed on 0–255 RGB; LAB-MSE is the mean squared CIELAB distance per pixel.[^ref]\n\n");
    if let Some(p) = passthrough {
        let _ = writeln!(
            s,
            "Grayscale passthrough (input returned unchanged): PSNR {:.4}, SSIM {:.4}, MAE {:.4}, LAB-MSE {:.4}.\n",
            p.psnr_db, p.ssim, p.mae, p.lab_mse
        );
    }
    if let Some(sum) = summary {
        let c = &sum.config;
        let _ = writeln!(s, "## Run\n");
        let _ = writeln!(s, "- steps: {}", sum.steps);
        let _ = writeln!(s, "- images: {} train, {} validation", sum.train_images, sum.val_images);
        let _ = writeln!(
            s,
            "- learning rate: {:e} (reference {:e} × {})",
            sum.learning_rate, c.reference_learning_rate, c.lr_multiplier
        );
        let _ = writeln!(s, "- batch size: {}, training prompts: {}", c.batch_size, sum.prompts.len());
        let _ = writeln!(
            s,
            "- sampler: {} DDIM steps, text guidance {}, image guidance {}, latent clamp {}",
            c.sampler.steps,
            c.guidance.s_text,
            c.guidance.s_image,
            c.sampler.clip_x0.map_or("off".to_string(), |v| format!("±{v}"))
        );
        let _ = writeln!(s, "- seed: {}, validation seed: {}\n", c.seed, c.val_seed);
        let _ = writeln!(s, "![loss curve]({LOSS_CURVE_FILE})\n");
    }
    let _ = writeln!(s, "[^ref]: {}", reference_footnote());
    s
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub loss_curve: PathBuf,
    pub markdown: PathBuf,
    pub stage_grid: Option<PathBuf>,
}

/// Renders the loss curve and report for a finished fine-tuning run.
pub fn write_run_report(run_dir: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<ReportFiles> {
    let (run_dir, out) = (run_dir.as_ref(), out.as_ref());
    fs::create_dir_all(out).at(out)?;
    let log = RunLog::read(run_dir)?;
    let summary = RunSummary::read(run_dir)?;
    let tuned = MetricsReport::read_csv(run_dir.join(FINAL_METRICS_FILE))?;
    let passthrough = MetricsReport::read_csv(run_dir.join(PASSTHROUGH_METRICS_FILE))?;
    let baseline_path = run_dir.join(BASELINE_METRICS_FILE);
    let baseline = if baseline_path.exists() {
        Some(MetricsReport::read_csv(&baseline_path)?)
    } else {
        None
    };
    let loss_curve_path = out.join(LOSS_CURVE_FILE);
    loss_curve(&log, baseline.as_ref().map(|b| b.lab_mse), Some(passthrough.lab_mse)).save_png(&loss_curve_path)?;
    let cmp = Comparison {
        baseline_name: if baseline.is_some() { "Before fine-tuning (step 0)".into() } else { "Grayscale passthrough".into() },
        tuned_name: format!("Fine-tuned (step {})", summary.steps),
        baseline: baseline.clone().unwrap_or_else(|| passthrough.clone()),
        tuned,
    };
    let md_path = out.join(REPORT_FILE);
    fs::write(&md_path, report_markdown(&cmp, Some(&passthrough), Some(&summary))).at(&md_path)?;
    let grid = run_dir.join("snapshots").join(STAGE_GRID_FILE);
    let stage_grid = if grid.exists() {
        let dst = out.join(STAGE_GRID_FILE);
        if dst != grid {
            fs::copy(&grid, &dst).at(&dst)?;
        }
        Some(dst)
    } else {
        None
    };
    Ok(ReportFiles {
        loss_curve: loss_curve_path,
        markdown: md_path,
        stage_grid,
    })
}
