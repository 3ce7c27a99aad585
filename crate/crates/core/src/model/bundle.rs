use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::autoencoder::{Autoencoder, AutoencoderConfig, DOWNSAMPLE};
use super::denoiser::{Denoiser, DenoiserConfig};
use super::params::ParamStore;
use super::text::{TextEmbedding, TextEncoder, TextEncoderConfig};
use super::{images_to_tensor, tensor_to_images};
use crate::colorspace::PixelImage;
use crate::error::{Error, Result};

const TEXT_SEED_SALT: u64 = 0x7e47;
const DENOISER_SEED_SALT: u64 = 0xd3_0153;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub autoencoder: AutoencoderConfig,
    pub text: TextEncoderConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            autoencoder: AutoencoderConfig::default(),
            text: TextEncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A tiny configuration (16×16 images, narrow denoiser) for gradient
    /// checks and fast tests.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            autoencoder: AutoencoderConfig::default(),
            text: TextEncoderConfig {
                vocab_size: 64,
                max_tokens: 4,
                dim: 8,
            },
            denoiser: DenoiserConfig {
                widths: [8, 16],
                groups: 4,
                time_features: 8,
                time_dim: 16,
                text_dim: 8,
                ..Default::default()
            },
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / DOWNSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(2 * DOWNSAMPLE) {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a positive multiple of {}",
                self.image_size,
                2 * DOWNSAMPLE
            )));
        }
        if self.autoencoder.latent_channels != self.denoiser.latent_channels {
            return Err(Error::InvalidArgument("autoencoder and denoiser latent channels differ".into()));
        }
        if self.text.dim != self.denoiser.text_dim {
            return Err(Error::InvalidArgument("text embedding width and denoiser text_dim differ".into()));
        }
        Ok(())
    }

    /// Latent shape `(C, h, w)` for one image.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.latent_size();
        (self.autoencoder.latent_channels, s, s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Autoencoder,
    TextEncoder,
    Denoiser,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Autoencoder, Component::TextEncoder, Component::Denoiser];

    pub fn name(self) -> &'static str {
        match self {
            Component::Autoencoder => "autoencoder",
            Component::TextEncoder => "text_encoder",
            Component::Denoiser => "denoiser",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which components are excluded from gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub autoencoder: bool,
    pub text_encoder: bool,
    pub denoiser: bool,
}

impl Default for FreezeFlags {
    /// Autoencoder and text encoder frozen, denoiser trainable.
    fn default() -> Self {
        Self {
            autoencoder: true,
            text_encoder: true,
            denoiser: false,
        }
    }
}

impl FreezeFlags {
    pub fn get(&self, c: Component) -> bool {
        match c {
            Component::Autoencoder => self.autoencoder,
            Component::TextEncoder => self.text_encoder,
            Component::Denoiser => self.denoiser,
        }
    }
}

/// A batch of latents, `(B, C, image/4, image/4)`.
#[derive(Debug, Clone)]
pub struct LatentTensor(pub Tensor);

impl LatentTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> &[usize] {
        self.0.dims()
    }
}

/// Autoencoder, text encoder and denoiser with their freeze flags.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub freeze: FreezeFlags,
    pub autoencoder: Autoencoder,
    pub text_encoder: TextEncoder,
    pub denoiser: Denoiser,
    pub seed: u64,
    pub step: usize,
}

impl ModelBundle {
    /// Wraps a pretrained autoencoder with a seeded text encoder and a
    /// freshly initialized denoiser, using the default freeze flags.
    pub fn new(config: ModelConfig, autoencoder: Autoencoder, seed: u64) -> Result<Self> {
        Self::with_dtype(config, autoencoder, seed, DType::F32)
    }

    pub fn with_dtype(config: ModelConfig, autoencoder: Autoencoder, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        if autoencoder.config() != &config.autoencoder {
            return Err(Error::InvalidArgument("autoencoder config differs from model config".into()));
        }
        let device = autoencoder.device();
        let freeze = FreezeFlags::default();
        let autoencoder = if autoencoder.store().is_trainable() {
            autoencoder.frozen()?
        } else {
            autoencoder
        };
        let text_encoder =
            TextEncoder::new(&config.text, ParamStore::seeded(seed ^ TEXT_SEED_SALT, false), dtype, &device)?;
        let denoiser = Denoiser::new(
            &config.denoiser,
            ParamStore::seeded(seed ^ DENOISER_SEED_SALT, !freeze.denoiser),
            dtype,
            &device,
        )?;
        Ok(Self {
            config,
            freeze,
            autoencoder,
            text_encoder,
            denoiser,
            seed,
            step: 0,
        })
    }

    pub fn device(&self) -> &Device {
        self.denoiser.device()
    }

    pub fn dtype(&self) -> DType {
        self.denoiser.dtype()
    }

    pub fn store(&self, c: Component) -> &ParamStore {
        match c {
            Component::Autoencoder => self.autoencoder.store(),
            Component::TextEncoder => self.text_encoder.store(),
            Component::Denoiser => self.denoiser.store(),
        }
    }

    /// Variables of every non-frozen component.
    pub fn trainable_vars(&self) -> Vec<Var> {
        Component::ALL
            .into_iter()
            .filter(|c| !self.freeze.get(*c))
            .flat_map(|c| self.store(c).vars())
            .collect()
    }

    /// An independent copy: training the copy leaves `self` untouched.
    pub fn deep_clone(&self) -> Result<Self> {
        let dtype = self.dtype();
        let device = self.device().clone();
        let copy = |c: Component| -> Result<ParamStore> {
            let s = self.store(c);
            if s.is_trainable() {
                s.trainable_copy()
            } else {
                s.frozen()
            }
        };
        Ok(Self {
            config: self.config.clone(),
            freeze: self.freeze,
            autoencoder: Autoencoder::new(
                &self.config.autoencoder,
                copy(Component::Autoencoder)?,
                self.autoencoder.latent_scale(),
                self.autoencoder.dtype(),
                &device,
            )?,
            text_encoder: TextEncoder::new(&self.config.text, copy(Component::TextEncoder)?, dtype, &device)?,
            denoiser: Denoiser::new(&self.config.denoiser, copy(Component::Denoiser)?, dtype, &device)?,
            seed: self.seed,
            step: self.step,
        })
    }

    fn check_image(&self, img: &PixelImage) -> Result<()> {
        if !img.height().is_multiple_of(DOWNSAMPLE) || !img.width().is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by the downsampling factor {DOWNSAMPLE}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// Scaled posterior-mean latents for a batch of images, in the
    /// denoiser's dtype and detached from any graph.
    pub fn encode_images(&self, images: &[&PixelImage]) -> Result<LatentTensor> {
        for img in images {
            self.check_image(img)?;
        }
        let x = images_to_tensor(images, self.autoencoder.dtype(), self.device())?;
        let z = self.autoencoder.encode(&x)?.to_dtype(self.dtype())?.detach();
        Ok(LatentTensor(z))
    }

    pub fn encode_image(&self, img: &PixelImage) -> Result<LatentTensor> {
        self.encode_images(&[img])
    }

    pub fn decode_latents(&self, z: &LatentTensor) -> Result<Vec<PixelImage>> {
        let (c, h, w) = self.config.latent_shape();
        let dims = z.dims();
        if dims.len() != 4 || dims[1] != c || dims[2] != h || dims[3] != w {
            return Err(Error::Shape(format!("latent {dims:?}, expected (B, {c}, {h}, {w})")));
        }
        let t = z.tensor().to_dtype(self.autoencoder.dtype())?;
        tensor_to_images(&self.autoencoder.decode(&t)?)
    }

    pub fn decode_latent(&self, z: &LatentTensor) -> Result<PixelImage> {
        let mut imgs = self.decode_latents(z)?;
        if imgs.len() != 1 {
            return Err(Error::Shape(format!("expected a single latent, got {}", imgs.len())));
        }
        Ok(imgs.remove(0))
    }

    pub fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        self.text_encoder.encode(prompt)
    }

    /// Stacks per-item text embeddings into `(B, L, D)`.
    pub fn stack_text(&self, texts: &[&TextEmbedding]) -> Result<Tensor> {
        let ts: Vec<&Tensor> = texts.iter().map(|t| t.tensor()).collect();
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// The learned null text embedding broadcast to `(B, L, D)`.
    pub fn null_text(&self, batch: usize) -> Result<Tensor> {
        let l = self.config.text.max_tokens;
        let d = self.config.text.dim;
        Ok(self.denoiser.null_text().unsqueeze(0)?.broadcast_as((batch, l, d))?)
    }

    /// Noise prediction for a batch.
    pub fn denoise_predict(
        &self,
        z_noisy: &LatentTensor,
        z_cond: &LatentTensor,
        t: &[usize],
        text: &Tensor,
    ) -> Result<LatentTensor> {
        let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        Ok(LatentTensor(self.denoiser.forward(z_noisy.tensor(), z_cond.tensor(), &tf, text)?))
    }

    /// Hex SHA-256 over the configuration and every parameter's bytes.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config)?);
        h.update(self.autoencoder.latent_scale().to_le_bytes());
        for c in Component::ALL {
            for (name, t) in self.store(c).tensors() {
                h.update(c.name().as_bytes());
                h.update(name.as_bytes());
                for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                    h.update(v.to_le_bytes());
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Fails unless every parameter is finite.
    pub fn check_finite(&self) -> Result<()> {
        for c in Component::ALL {
            self.store(c).check_finite()?;
        }
        Ok(())
    }
}
