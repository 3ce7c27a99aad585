use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "colorize", version, about = "Instruction-conditioned latent diffusion colorization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or synthesize paired grayscale/color datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Manage instruction prompts.
    #[command(subcommand)]
    Prompts(PromptsCommand),
    /// Pretrain the image autoencoder.
    #[command(subcommand)]
    Autoencoder(AutoencoderCommand),
    /// Fine-tune the denoiser on a dataset.
    Finetune(FinetuneArgs),
    /// Colorize grayscale images with a checkpoint.
    Sample(SampleArgs),
    /// Compute PSNR, SSIM, MAE and LAB-MSE.
    Evaluate(EvaluateArgs),
    /// Run a hyperparameter sweep.
    Sweep(SweepArgs),
    /// Render the loss curve and comparison table of a fine-tuning run.
    Report(ReportArgs),
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the output directory if it already exists.
    #[arg(long, default_value_t = false)]
    pub force: bool,
    /// Seed for all randomness of this command [default: 0, or the seed in --config].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Turn a directory of color images into a paired dataset with a manifest.
    Build(DatasetBuildArgs),
    /// Write synthetic color portraits, usable as a source directory for `build`.
    Synth(DatasetSynthArgs),
}

#[derive(Debug, Args)]
pub struct DatasetBuildArgs {
    /// Directory of color source images.
    #[arg(long)]
    pub src: PathBuf,
    /// Side length of the square output images.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Fraction of images held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// prompts.json from `prompts expand`; expanded on the fly when absent.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Number of training prompts when expanding on the fly.
    #[arg(long, default_value_t = 30)]
    pub n_prompts: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DatasetSynthArgs {
    /// Number of portraits.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Subcommand)]
pub enum PromptsCommand {
    /// Paraphrase the base prompt into a pool of training prompts.
    ///
    /// Uses the HTTP endpoint in COLORIZE_PROMPT_ENDPOINT (bearer token in
    /// COLORIZE_PROMPT_TOKEN) when set, otherwise the bundled paraphrases.
    Expand(PromptsExpandArgs),
}

#[derive(Debug, Args)]
pub struct PromptsExpandArgs {
    /// Base instruction, reserved for validation.
    #[arg(long, default_value = colorize_core::data::BASE_PROMPT)]
    pub base: String,
    /// Number of training prompts.
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Subcommand)]
pub enum AutoencoderCommand {
    /// Train the autoencoder on a dataset's color targets and save a full
    /// model checkpoint with a freshly initialized denoiser.
    Pretrain(PretrainArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset manifest (file or directory).
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON model configuration; image size always follows the dataset.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub kl_weight: f64,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[command(flatten)]
    pub common: Common,
}

/// Overrides of fields of a training configuration file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    /// JSON or TOML training configuration [default: built-in configuration].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optimizer steps [default: from config, 50].
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Images per step [default: from config, 4].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training prompts in use [default: from config, 30].
    #[arg(long)]
    pub n_prompts: Option<usize>,
    /// Scale applied to the reference learning rate [default: from config, 100].
    #[arg(long)]
    pub lr_multiplier: Option<f64>,
    /// Validation interval [default: from config, max_steps / 10].
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Early,middle,late snapshot steps [default: from config, max_steps/5, max_steps/2, max_steps].
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub snapshot_steps: Option<Vec<usize>>,
    /// Sampler steps used for validation [default: from config, 20].
    #[arg(long)]
    pub sampler_steps: Option<usize>,
    /// Text guidance scale [default: from config, 2].
    #[arg(long)]
    pub s_text: Option<f64>,
    /// Image guidance scale [default: from config, 1.5].
    #[arg(long)]
    pub s_image: Option<f64>,
    /// Clamp of the sampler's clean-latent estimate, 0 to disable [default: from config, 3].
    #[arg(long)]
    pub clip_x0: Option<f64>,
    /// Seed of validation sampling noise [default: from config, 0].
    #[arg(long)]
    pub val_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Model checkpoint directory (from `autoencoder pretrain`).
    #[arg(long)]
    pub bundle: PathBuf,
    /// Dataset manifest (file or directory).
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Model checkpoint directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Input image(s); color inputs are converted to grayscale.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Instruction prompt.
    #[arg(long, default_value = colorize_core::data::BASE_PROMPT)]
    pub prompt: String,
    /// DDIM steps.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Text guidance scale.
    #[arg(long, default_value_t = 2.0)]
    pub s_text: f64,
    /// Image guidance scale.
    #[arg(long, default_value_t = 1.5)]
    pub s_image: f64,
    /// Clamp of the clean-latent estimate at each step; 0 disables it.
    #[arg(long, default_value_t = 3.0)]
    pub clip_x0: f64,
    /// Diffusion timesteps of the noise schedule.
    #[arg(long, default_value_t = 200)]
    pub timesteps: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// CSV with `generated,target` image path columns.
    #[arg(long, conflicts_with_all = ["bundle", "manifest", "baseline"])]
    pub pairs: Option<PathBuf>,
    /// Checkpoint to validate on a dataset's validation split.
    #[arg(long, requires = "manifest")]
    pub bundle: Option<PathBuf>,
    /// Dataset manifest (file or directory).
    #[arg(long, requires = "bundle")]
    pub manifest: Option<PathBuf>,
    /// Second checkpoint to compare against; writes comparison.md.
    #[arg(long, requires = "bundle")]
    pub baseline: Option<PathBuf>,
    /// Training configuration supplying sampler settings [default: built-in configuration].
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    OneFactor,
    FullCross,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Model checkpoint directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Dataset manifest (file or directory).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Learning-rate multipliers of the base rate.
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 1.0, 0.2])]
    pub lr_ratios: Vec<f64>,
    /// Batch sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8])]
    pub batch_sizes: Vec<usize>,
    /// Training prompt counts.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 30])]
    pub prompt_counts: Vec<usize>,
    /// Vary one axis at a time around the base, or run the full product.
    #[arg(long, value_enum, default_value_t = ModeArg::OneFactor)]
    pub mode: ModeArg,
    /// Continue a sweep in an existing output directory, skipping finished arms.
    #[arg(long, default_value_t = false, conflicts_with = "force")]
    pub resume: bool,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a `finetune` run.
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub common: Common,
}
