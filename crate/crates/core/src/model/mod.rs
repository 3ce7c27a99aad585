//! The three-part model: image autoencoder, text encoder and conditional
//! denoising U-Net, bundled with per-component freeze flags.

mod autoencoder;
mod bundle;
mod checkpoint;
mod denoiser;
pub mod params;
mod text;

pub use autoencoder::{
    pretrain_autoencoder, Autoencoder, AutoencoderConfig, AutoencoderTrainConfig, EvalPoint,
    Pretrained, ReconstructionReport,
};
pub use bundle::{Component, FreezeFlags, LatentTensor, ModelBundle, ModelConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_FORMAT, HEADER_FILE};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use params::ParamStore;
pub use text::{normalize_prompt, TextEmbedding, TextEncoder, TextEncoderConfig};

use candle_core::{DType, Device, Tensor};

use crate::colorspace::PixelImage;
use crate::error::{Error, Result};

/// Stacks images into a `(B, 3, H, W)` tensor with values in `[0, 1]`.
pub fn images_to_tensor(images: &[&PixelImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to stack".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::DimensionMismatch {
                left_h: h,
                left_w: w,
                right_h: img.height(),
                right_w: img.width(),
            });
        }
        let px = img.as_slice();
        for c in 0..3 {
            data.extend(px.iter().skip(c).step_by(3).map(|&v| v as f32));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Splits a `(B, 3, H, W)` tensor back into images, clamping into `[0, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<PixelImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    (0..b)
        .map(|i| {
            let base = i * 3 * plane;
            let mut data = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for ch in 0..3 {
                    data.push(flat[base + ch * plane + p]);
                }
            }
            PixelImage::new_clamped(h, w, data)
        })
        .collect()
}

/// `(B, C*4, H, W)` → `(B, C, 2H, 2W)`.
pub(crate) fn pixel_shuffle2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    x.reshape((b, c, 2, 2, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, 2 * h, 2 * w))
}
