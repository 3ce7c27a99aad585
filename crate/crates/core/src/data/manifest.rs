//! Paired grayscale/color datasets: building, manifests and validation.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompts::PromptPool;
use crate::colorspace::{to_grayscale, PixelImage};
use crate::error::{Error, IoContext, Result};
use crate::model::normalize_prompt;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_META_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    #[serde(rename = "input")]
    pub input_path: PathBuf,
    #[serde(rename = "target")]
    pub target_path: PathBuf,
    pub prompt: String,
    pub split: Split,
}

/// Sidecar metadata written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub image_size: usize,
    pub created_at: String,
    pub base_prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory the sample paths are relative to.
    pub root: PathBuf,
    pub samples: Vec<SamplePair>,
    pub seed: u64,
    pub image_size: usize,
    pub created_at: String,
    pub base_prompt: String,
}

/// A decoded sample.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub name: String,
    pub input: PixelImage,
    pub target: PixelImage,
    pub prompt: String,
}

impl DatasetManifest {
    /// Reads `manifest.jsonl` (or the given file) and its `dataset.json` sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&file).at(&file)?;
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: SamplePair = serde_json::from_str(line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", file.display(), i + 1)))?;
            samples.push(s);
        }
        if samples.is_empty() {
            return Err(Error::Dataset(format!("{} has no samples", file.display())));
        }
        let meta_path = root.join(DATASET_META_FILE);
        let meta: DatasetMeta = if meta_path.exists() {
            serde_json::from_str(&fs::read_to_string(&meta_path).at(&meta_path)?)?
        } else {
            let first = PixelImage::load(root.join(&samples[0].target_path))?;
            DatasetMeta {
                seed: 0,
                image_size: first.height(),
                created_at: String::new(),
                base_prompt: super::BASE_PROMPT.to_string(),
            }
        };
        Ok(Self {
            root,
            samples,
            seed: meta.seed,
            image_size: meta.image_size,
            created_at: meta.created_at,
            base_prompt: meta.base_prompt,
        })
    }

    /// Writes `manifest.jsonl` and `dataset.json` into `self.root`.
    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).at(&self.root)?;
        let path = self.root.join(MANIFEST_FILE);
        let mut out = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(&path).at(&path)?;
        f.write_all(&out).at(&path)?;
        let meta = DatasetMeta {
            seed: self.seed,
            image_size: self.image_size,
            created_at: self.created_at.clone(),
            base_prompt: self.base_prompt.clone(),
        };
        let meta_path = self.root.join(DATASET_META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).at(&meta_path)?;
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SamplePair> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Decodes every sample of `split`, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedSample>> {
        self.split(split)
            .map(|s| {
                Ok(LoadedSample {
                    name: sample_name(s),
                    input: PixelImage::load(self.resolve(&s.input_path))?,
                    target: PixelImage::load(self.resolve(&s.target_path))?,
                    prompt: s.prompt.clone(),
                })
            })
            .collect()
    }

    /// Distinct training prompts in order of first appearance.
    pub fn train_prompts(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.split(Split::Train)
            .filter(|s| seen.insert(normalize_prompt(&s.prompt)))
            .map(|s| s.prompt.clone())
            .collect()
    }

    /// Stable digest of the manifest contents (not the image bytes).
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.image_size.to_le_bytes());
        for s in &self.samples {
            h.update(serde_json::to_vec(s).unwrap_or_default());
        }
        hex::encode(h.finalize())
    }
}

fn sample_name(s: &SamplePair) -> String {
    s.target_path
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub image_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub manifest: DatasetManifest,
    /// Source files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Number of validation samples for `n` images.
pub fn val_count(n: usize, val_fraction: f64) -> usize {
    let raw = (n as f64 * val_fraction).round() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

fn center_square(img: image::RgbImage, size: usize) -> image::RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side as usize == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    }
}

/// Decodes any supported image, center-crops it to a square and resizes it
/// to `size`×`size`.
pub fn load_square(path: impl AsRef<Path>, size: usize) -> Result<PixelImage> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path).at(path)?.with_guessed_format().at(path)?.decode()?;
    Ok(PixelImage::from_rgb8(&center_square(img.to_rgb8(), size)))
}

/// Builds a paired dataset from a directory of color images.
///
/// Files with an image extension are processed in name order; undecodable
/// ones are skipped and reported. Other files are ignored. Each image is center-cropped and resized to a square, stored as
/// the target, and its grayscale conversion stored as the input. Validation
/// samples are chosen by a seeded shuffle and carry the base prompt; training
/// samples draw a prompt uniformly from `pool`.
pub fn build_dataset(src: impl AsRef<Path>, out: impl AsRef<Path>, cfg: &BuildConfig, pool: &PromptPool) -> Result<BuildOutput> {
    let (src, out) = (src.as_ref(), out.as_ref());
    if cfg.image_size == 0 || !cfg.image_size.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!("image size {} must be a positive multiple of 8", cfg.image_size)));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("val fraction {} must be in (0, 1)", cfg.val_fraction)));
    }
    pool.validate()?;
    let mut files: Vec<PathBuf> = fs::read_dir(src)
        .at(src)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && image::ImageFormat::from_path(p).is_ok())
        .collect();
    files.sort();

    let mut decoded = Vec::new();
    let mut skipped = Vec::new();
    for path in files {
        match image::ImageReader::open(&path)
            .map_err(|e| e.to_string())
            .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
            .and_then(|r| r.decode().map_err(|e| e.to_string()))
        {
            Ok(img) => decoded.push((path, img.to_rgb8())),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                skipped.push((path, reason));
            }
        }
    }
    if decoded.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} decodable images in {}; at least 2 are needed",
            decoded.len(),
            src.display()
        )));
    }

    let n = decoded.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let mut is_val = vec![false; n];
    for &i in &order[..val_count(n, cfg.val_fraction)] {
        is_val[i] = true;
    }

    fs::create_dir_all(out.join("targets")).at(out)?;
    fs::create_dir_all(out.join("inputs")).at(out)?;
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut samples = Vec::with_capacity(n);
    let mut used: HashMap<String, usize> = HashMap::new();
    for (i, (path, rgb)) in decoded.into_iter().enumerate() {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("image{i}"));
        let count = used.entry(stem.clone()).or_insert(0);
        let name = if *count == 0 { stem.clone() } else { format!("{stem}_{count}") };
        *count += 1;

        let target = PixelImage::from_rgb8(&center_square(rgb, cfg.image_size));
        let input = to_grayscale(&target);
        let target_rel = PathBuf::from("targets").join(format!("{name}.png"));
        let input_rel = PathBuf::from("inputs").join(format!("{name}.png"));
        target.save_png(out.join(&target_rel))?;
        input.save_png(out.join(&input_rel))?;

        let (prompt, split) = if is_val[i] {
            (pool.base_prompt.clone(), Split::Val)
        } else {
            (pool.train_prompts[rng_index(&mut prompt_rng, pool.len())].clone(), Split::Train)
        };
        samples.push(SamplePair {
            input_path: input_rel,
            target_path: target_rel,
            prompt,
            split,
        });
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        samples,
        seed: cfg.seed,
        image_size: cfg.image_size,
        created_at: chrono::Utc::now().to_rfc3339(),
        base_prompt: pool.base_prompt.clone(),
    };
    manifest.save()?;
    Ok(BuildOutput { manifest, skipped })
}

fn rng_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    MissingFile,
    Undecodable,
    SizeMismatch,
    GrayscalePairing,
    ValPrompt,
    TrainPrompt,
    SplitOverlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub sample: usize,
    pub rule: Rule,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "sample {}: {:?}: {}", self.sample, self.rule, self.detail)
    }
}

/// Tolerance for the grayscale pairing check, on the [0,1] scale, applied
/// after both sides are quantized to 8 bits.
pub const PAIRING_TOLERANCE: f64 = 1e-6;

/// Checks every sample against the dataset invariants.
///
/// The input must equal the 8-bit quantized grayscale conversion of the
/// target; validation samples must use the base prompt and training samples
/// must not; no target may appear in both splits.
pub fn validate_manifest(m: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let base = normalize_prompt(&m.base_prompt);
    let mut splits_of: HashMap<PathBuf, Vec<Split>> = HashMap::new();
    for (i, s) in m.samples.iter().enumerate() {
        let mut v = |rule, detail: String| out.push(Violation { sample: i, rule, detail });
        splits_of.entry(s.target_path.clone()).or_default().push(s.split);
        let prompt = normalize_prompt(&s.prompt);
        match s.split {
            Split::Val if prompt != base => v(Rule::ValPrompt, format!("validation prompt {:?} is not the base prompt", s.prompt)),
            Split::Train if prompt == base || prompt.is_empty() => {
                v(Rule::TrainPrompt, format!("training prompt {:?} is empty or the base prompt", s.prompt))
            }
            _ => {}
        }
        let mut load = |rel: &Path| -> Option<PixelImage> {
            let path = m.resolve(rel);
            if !path.exists() {
                v(Rule::MissingFile, format!("{} does not exist", path.display()));
                return None;
            }
            match PixelImage::load(&path) {
                Ok(img) => Some(img),
                Err(e) => {
                    v(Rule::Undecodable, format!("{}: {e}", path.display()));
                    None
                }
            }
        };
        let (Some(input), Some(target)) = (load(&s.input_path), load(&s.target_path)) else {
            continue;
        };
        for (what, img) in [("input", &input), ("target", &target)] {
            if img.height() != m.image_size || img.width() != m.image_size {
                v(Rule::SizeMismatch, format!("{what} is {}x{}, expected {}", img.height(), img.width(), m.image_size));
            }
        }
        if input.height() != target.height() || input.width() != target.width() {
            continue;
        }
        let expected = to_grayscale(&target).quantized();
        let worst = expected
            .as_slice()
            .iter()
            .zip(input.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if worst > PAIRING_TOLERANCE {
            v(Rule::GrayscalePairing, format!("input differs from grayscale target by {worst:.6}"));
        }
    }
    for (path, splits) in splits_of {
        if splits.contains(&Split::Train) && splits.contains(&Split::Val) {
            let sample = m.samples.iter().position(|s| s.target_path == path).unwrap_or(0);
            out.push(Violation {
                sample,
                rule: Rule::SplitOverlap,
                detail: format!("{} is in both splits", path.display()),
            });
        }
    }
    out.sort_by_key(|v| v.sample);
    out
}
