//! Image quality metrics: PSNR, SSIM, MAE on the 0–255 RGB scale and the
//! CIELAB mean squared error used as the validation loss.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::colorspace::{rgb_to_lab_pixel, PixelImage};
use crate::error::{Error, IoContext, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;

fn check_dims(a: &PixelImage, b: &PixelImage) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::DimensionMismatch {
            left_h: a.height(),
            left_w: a.width(),
            right_h: b.height(),
            right_w: b.width(),
        });
    }
    Ok(())
}

/// Mean squared error on the 0–255 scale over all pixels and channels.
pub fn mse_255(a: &PixelImage, b: &PixelImage) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| {
            let d = (x - y) * DYNAMIC_RANGE;
            d * d
        })
        .sum();
    Ok(sum / a.as_slice().len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &PixelImage, b: &PixelImage) -> Result<f64> {
    let mse = mse_255(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * DYNAMIC_RANGE.log10() - 10.0 * mse.log10())
}

/// Mean absolute error on the 0–255 scale.
pub fn mae(a: &PixelImage, b: &PixelImage) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| ((x - y) * DYNAMIC_RANGE).abs())
        .sum();
    Ok(sum / a.as_slice().len() as f64)
}

/// Squared CIELAB distance (summed over L, a, b) averaged over pixels.
pub fn lab_mse(generated: &PixelImage, target: &PixelImage) -> Result<f64> {
    check_dims(generated, target)?;
    let mut sum = 0.0;
    for (g, t) in generated.pixels().zip(target.pixels()) {
        let lg = rgb_to_lab_pixel(g);
        let lt = rgb_to_lab_pixel(t);
        for c in 0..3 {
            let d = lg[c] - lt[c];
            sum += d * d;
        }
    }
    Ok(sum / (generated.height() * generated.width()) as f64)
}

fn gaussian_kernel_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let src = &plane[y * w + x..y * w + x + SSIM_WINDOW];
            rows[y * ow + x] = src.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += rows[(y + i) * ow + x] * kv;
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03,
/// range 255), computed per channel and averaged over the three channels.
pub fn ssim(a: &PixelImage, b: &PixelImage) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let k = gaussian_kernel_1d();
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.pixels().map(|p| p[c] * DYNAMIC_RANGE).collect();
        let pb: Vec<f64> = b.pixels().map(|p| p[c] * DYNAMIC_RANGE).collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&paa, h, w, &k);
        let e_bb = filter_valid(&pbb, h, w, &k);
        let e_ab = filter_valid(&pab, h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Metrics for one (generated, target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
    pub lab_mse: f64,
}

impl ImageMetrics {
    pub fn compute(name: impl Into<String>, generated: &PixelImage, target: &PixelImage) -> Result<Self> {
        Ok(Self {
            image: name.into(),
            psnr_db: psnr(generated, target)?,
            ssim: ssim(generated, target)?,
            mae: mae(generated, target)?,
            lab_mse: lab_mse(generated, target)?,
        })
    }
}

/// Per-image rows plus their means, in the column layout of the comparison table.
///
/// PSNR is averaged per image (not pooled); an identical pair contributes `inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ImageMetrics>,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
    pub lab_mse: f64,
    pub n_images: usize,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<ImageMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("metrics report needs at least one row".into()));
        }
        let n = rows.len() as f64;
        // Fixed summation order: row order.
        let mean = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            psnr_db: mean(|r| r.psnr_db),
            ssim: mean(|r| r.ssim),
            mae: mean(|r| r.mae),
            lab_mse: mean(|r| r.lab_mse),
            n_images: rows.len(),
            rows,
        })
    }

    pub fn aggregate(&self) -> ImageMetrics {
        ImageMetrics {
            image: "mean".into(),
            psnr_db: self.psnr_db,
            ssim: self.ssim,
            mae: self.mae,
            lab_mse: self.lab_mse,
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("image,psnr_db,ssim,mae,lab_mse\n");
        for row in self.rows.iter().chain(std::iter::once(&self.aggregate())) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.image,
                fmt_metric(row.psnr_db),
                fmt_metric(row.ssim),
                fmt_metric(row.mae),
                fmt_metric(row.lab_mse)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).at(path)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = |i: usize| -> Result<f64> {
                parse_metric(record.get(i).unwrap_or_default()).ok_or_else(|| {
                    Error::InvalidArgument(format!("{}: bad metric value", path.display()))
                })
            };
            let image = record.get(0).unwrap_or_default().to_string();
            if image == "mean" {
                continue;
            }
            rows.push(ImageMetrics {
                image,
                psnr_db: field(1)?,
                ssim: field(2)?,
                mae: field(3)?,
                lab_mse: field(4)?,
            });
        }
        Self::from_rows(rows)
    }
}

/// Formats a metric; infinity is written as `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

pub fn parse_metric(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" => Some(f64::INFINITY),
        other => other.parse().ok(),
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PSNR {} dB, SSIM {:.4}, MAE {:.4}, LAB-MSE {:.4} over {} images",
            fmt_metric(self.psnr_db),
            self.ssim,
            self.mae,
            self.lab_mse,
            self.n_images
        )
    }
}

#[derive(Debug, Deserialize)]
struct PairRecord {
    generated: String,
    target: String,
}

/// Reads a CSV of `generated,target` paths (relative paths resolve against
/// the CSV's directory).
pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize::<PairRecord>()
        .map(|r| {
            let r = r?;
            Ok((base.join(r.generated), base.join(r.target)))
        })
        .collect()
}

/// Evaluates every pair in a pairs CSV.
pub fn evaluate_pairs(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let pairs = read_pairs(path)?;
    let rows = pairs
        .iter()
        .map(|(g, t)| {
            let name = g
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            ImageMetrics::compute(name, &PixelImage::load(g)?, &PixelImage::load(t)?)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(rows)
}
