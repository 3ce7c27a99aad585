//! KL-regularized convolutional autoencoder with 4× spatial downsampling.

use std::time::Instant;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, Optimizer, ParamsAdamW, VarBuilder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{images_to_tensor, pixel_shuffle2, tensor_to_images};
use crate::colorspace::PixelImage;
use crate::error::{Error, Result};
use crate::metrics;

/// Spatial downsampling factor between images and latents.
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub latent_channels: usize,
    /// Channel widths at 1/2 and 1/4 resolution.
    pub widths: [usize; 2],
    /// Channels at full resolution in the decoder, before the RGB projection.
    pub out_channels: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: [16, 32],
            out_channels: 8,
        }
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: if k == 1 { 0 } else { 1 },
        stride,
        ..Default::default()
    };
    Ok(conv2d(cin, cout, k, cfg, vb)?)
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv2d,
    down: Conv2d,
    mid: Conv2d,
    moments: Conv2d,
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv2d,
    mid: Conv2d,
    up1: Conv2d,
    conv1: Conv2d,
    up2: Conv2d,
    conv_out: Conv2d,
}

/// Encoder/decoder pair plus the latent scale applied after encoding.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    latent_scale: f64,
}

impl Autoencoder {
    pub fn new(
        config: &AutoencoderConfig,
        store: ParamStore,
        latent_scale: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let vb = store.var_builder(dtype, device);
        let [c1, c2] = config.widths;
        let lc = config.latent_channels;
        let e = vb.pp("encoder");
        // 4x4 stride-2 kernels halve the resolution exactly with padding 1.
        let enc_cfg = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let encoder = Encoder {
            conv_in: conv2d(3, c1, 4, enc_cfg, e.pp("conv_in"))?,
            down: conv2d(c1, c2, 4, enc_cfg, e.pp("down"))?,
            mid: conv(c2, c2, 3, 1, e.pp("mid"))?,
            moments: conv(c2, 2 * lc, 1, 1, e.pp("moments"))?,
        };
        let d = vb.pp("decoder");
        let co = config.out_channels;
        let decoder = Decoder {
            conv_in: conv(lc, c2, 3, 1, d.pp("conv_in"))?,
            mid: conv(c2, c2, 3, 1, d.pp("mid"))?,
            up1: conv(c2, 4 * c1, 1, 1, d.pp("up1"))?,
            conv1: conv(c1, c1, 3, 1, d.pp("conv1"))?,
            up2: conv(c1, 4 * co, 1, 1, d.pp("up2"))?,
            conv_out: conv(co, 3, 3, 1, d.pp("conv_out"))?,
        };
        store.seal();
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoder,
            latent_scale,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    /// Posterior mean and log-variance for `(B, 3, H, W)` images in `[0, 1]`.
    pub fn moments(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = images.dims4()?;
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by the downsampling factor {DOWNSAMPLE}"
            )));
        }
        let x = images.affine(2.0, -1.0)?;
        let x = self.encoder.conv_in.forward(&x)?.silu()?;
        let x = self.encoder.down.forward(&x)?.silu()?;
        let x = (&x + self.encoder.mid.forward(&x)?.silu()?)?;
        let m = self.encoder.moments.forward(&x)?;
        let lc = self.config.latent_channels;
        let mean = m.narrow(1, 0, lc)?;
        let logvar = m.narrow(1, lc, lc)?.clamp(-30.0, 20.0)?;
        Ok((mean, logvar))
    }

    /// Unscaled latent to image in `[0, 1]`.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let x = self.decoder.conv_in.forward(z)?.silu()?;
        let x = (&x + self.decoder.mid.forward(&x)?.silu()?)?;
        let x = pixel_shuffle2(&self.decoder.up1.forward(&x)?)?.silu()?;
        let x = (&x + self.decoder.conv1.forward(&x)?.silu()?)?;
        let x = pixel_shuffle2(&self.decoder.up2.forward(&x)?)?.silu()?;
        Ok(candle_nn::ops::sigmoid(&self.decoder.conv_out.forward(&x)?)?)
    }

    /// Deterministic encoding: scaled posterior mean.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (mean, _) = self.moments(images)?;
        Ok(mean.affine(self.latent_scale, 0.0)?)
    }

    /// Inverse-scales a latent and decodes it.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, expected {}",
                self.config.latent_channels
            )));
        }
        self.decode_raw(&z.affine(1.0 / self.latent_scale, 0.0)?)
    }

    pub fn reconstruct(&self, images: &[&PixelImage]) -> Result<Vec<PixelImage>> {
        let device = self.device();
        let x = images_to_tensor(images, self.dtype(), &device)?;
        tensor_to_images(&self.decode(&self.encode(&x)?.detach())?)
    }

    pub(crate) fn dtype(&self) -> DType {
        self.encoder.moments.weight().dtype()
    }

    pub(crate) fn device(&self) -> Device {
        self.encoder.moments.weight().device().clone()
    }

    /// A copy with frozen parameters.
    pub fn frozen(&self) -> Result<Self> {
        Self::new(
            &self.config,
            self.store.frozen()?,
            self.latent_scale,
            self.dtype(),
            &self.device(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub eval_every: usize,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            learning_rate: 2e-3,
            kl_weight: 1e-4,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Reconstruction quality recorded during and after pretraining. MSE values
/// are per-channel pixel MSE in `[0, 1]` units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub evaluations: Vec<EvalPoint>,
    pub final_train_mse: f64,
    pub final_val_mse: f64,
    /// Mean LAB-MSE of decode(encode(x)) against x over the validation images.
    pub final_val_lab_mse: f64,
    pub latent_scale: f64,
    pub seconds: f64,
}

pub struct Pretrained {
    pub autoencoder: Autoencoder,
    pub report: ReconstructionReport,
}

fn pixel_mse(ae: &Autoencoder, images: &[PixelImage]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(16) {
        let refs: Vec<&PixelImage> = chunk.iter().collect();
        let x = images_to_tensor(&refs, ae.dtype(), &ae.device())?;
        let (mean, _) = ae.moments(&x)?;
        let recon = ae.decode_raw(&mean)?;
        let per = (recon - &x)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += per * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Trains the autoencoder from scratch and returns it frozen.
///
/// Loss is per-channel reconstruction MSE plus `kl_weight` times the mean KL
/// divergence of the diagonal Gaussian posterior from N(0, I). After training
/// the latent scale is set to `1 / std` of the training-set posterior means.
pub fn pretrain_autoencoder(
    train: &[PixelImage],
    val: &[PixelImage],
    model: &AutoencoderConfig,
    cfg: &AutoencoderTrainConfig,
    seed: u64,
    device: &Device,
) -> Result<Pretrained> {
    if train.len() < 32 {
        return Err(Error::InvalidArgument(format!(
            "autoencoder pretraining needs at least 32 images, got {}",
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("no validation images".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 || cfg.eval_every == 0 {
        return Err(Error::InvalidArgument(
            "steps, batch_size and eval_every must be positive".into(),
        ));
    }
    let started = Instant::now();
    let store = ParamStore::seeded(seed, true);
    let ae = Autoencoder::new(model, store, 1.0, DType::F32, device)?;
    let mut opt = candle_nn::AdamW::new(
        ae.store().vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xae);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut evaluations = Vec::new();

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let x = images_to_tensor(&batch, DType::F32, device)?;
        let (mean, logvar) = ae.moments(&x)?;
        let noise: Vec<f32> = (0..mean.elem_count())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        let noise = Tensor::from_vec(noise, mean.shape(), device)?;
        let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * noise)?)?;
        let recon = ae.decode_raw(&z)?;
        let rec_loss = (recon - &x)?.sqr()?.mean_all()?;
        let kl = ((mean.sqr()? + logvar.exp()?)? - 1.0)?
            .sub(&logvar)?
            .sum(D::Minus1)?
            .mean_all()?
            .affine(0.5, 0.0)?;
        let loss = (&rec_loss + kl.affine(cfg.kl_weight, 0.0)?)?;
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!(
                    "autoencoder loss {value} (reconstruction {}, kl {})",
                    rec_loss.to_scalar::<f32>()?,
                    kl.to_scalar::<f32>()?
                ),
            });
        }
        opt.backward_step(&loss)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let point = EvalPoint {
                step,
                train_mse: pixel_mse(&ae, train)?,
                val_mse: pixel_mse(&ae, val)?,
            };
            log::info!(
                "autoencoder step {step}: train mse {:.5}, val mse {:.5}",
                point.train_mse,
                point.val_mse
            );
            evaluations.push(point);
        }
    }

    // Latent scale from the training-set posterior means.
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for chunk in train.chunks(16) {
        let refs: Vec<&PixelImage> = chunk.iter().collect();
        let (mean, _) = ae.moments(&images_to_tensor(&refs, DType::F32, device)?)?;
        let v = mean.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        count += v.len();
        sum += v.iter().sum::<f64>();
        sum_sq += v.iter().map(|x| x * x).sum::<f64>();
    }
    let mu = sum / count as f64;
    let std = (sum_sq / count as f64 - mu * mu).max(1e-12).sqrt();
    let latent_scale = 1.0 / std;

    let frozen = Autoencoder::new(model, ae.store().frozen()?, latent_scale, DType::F32, device)?;
    let last = evaluations.last().cloned().expect("at least one evaluation");
    let val_refs: Vec<&PixelImage> = val.iter().collect();
    let recon = frozen.reconstruct(&val_refs)?;
    let lab = recon
        .iter()
        .zip(val)
        .map(|(r, t)| metrics::lab_mse(r, t))
        .sum::<Result<f64>>()?
        / val.len() as f64;
    let report = ReconstructionReport {
        final_train_mse: last.train_mse,
        final_val_mse: last.val_mse,
        final_val_lab_mse: lab,
        evaluations,
        latent_scale,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok(Pretrained {
        autoencoder: frozen,
        report,
    })
}
