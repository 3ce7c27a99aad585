//! Conditional denoising U-Net.
//!
//! Input is the channel concatenation of the noisy latent and the
//! conditioning (grayscale) latent. Two resolution levels; the timestep
//! embedding is injected into every residual block and the bottleneck
//! cross-attends to the text embedding with a single head.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{conv2d, group_norm, linear, Conv2d, Conv2dConfig, GroupNorm, Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub widths: [usize; 2],
    pub groups: usize,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
    pub time_dim: usize,
    pub text_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: [32, 64],
            groups: 8,
            time_features: 32,
            time_dim: 128,
            text_dim: 64,
        }
    }
}

impl DenoiserConfig {
    fn validate(&self) -> Result<()> {
        let [w0, w1] = self.widths;
        if w0 % self.groups != 0 || w1 % self.groups != 0 || !self.time_features.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "widths {:?} must be divisible by {} groups and time_features even",
                self.widths, self.groups
            )));
        }
        Ok(())
    }
}

fn conv3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    conv2d(
        cin,
        cout,
        3,
        Conv2dConfig {
            padding: 1,
            stride,
            ..Default::default()
        },
        vb,
    )
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, cfg: &DenoiserConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let skip = if cin != cout {
            Some(conv2d(cin, cout, 1, Default::default(), vb.pp("skip"))?)
        } else {
            None
        };
        Ok(Self {
            norm1: group_norm(cfg.groups, cin, 1e-5, vb.pp("norm1"))?,
            conv1: conv3(cin, cout, 1, vb.pp("conv1"))?,
            time: linear(cfg.time_dim, cout, vb.pp("time"))?,
            norm2: group_norm(cfg.groups, cout, 1e-5, vb.pp("norm2"))?,
            conv2: conv3(cout, cout, 1, vb.pp("conv2"))?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        h + skip
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    scale: f64,
}

impl CrossAttention {
    fn new(channels: usize, cfg: &DenoiserConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            norm: group_norm(cfg.groups, channels, 1e-5, vb.pp("norm"))?,
            q: linear(channels, channels, vb.pp("q"))?,
            k: linear(cfg.text_dim, channels, vb.pp("k"))?,
            v: linear(cfg.text_dim, channels, vb.pp("v"))?,
            out: linear(channels, channels, vb.pp("out"))?,
            scale: 1.0 / (channels as f64).sqrt(),
        })
    }

    /// `x`: `(B, C, H, W)`, `text`: `(B, L, text_dim)`.
    fn forward(&self, x: &Tensor, text: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self.q.forward(&seq)?;
        let k = self.k.forward(text)?;
        let v = self.v.forward(text)?;
        let scores = q.matmul(&k.transpose(1, 2)?.contiguous()?)?.affine(self.scale, 0.0)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = self.out.forward(&attn.matmul(&v)?)?;
        let o = o.transpose(1, 2)?.reshape((b, c, h, w))?;
        x + o
    }
}

/// Sinusoidal features of (possibly fractional) timesteps, `(B, features)`.
pub(crate) fn timestep_features(t: &[f64], features: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = features / 2;
    let mut data = Vec::with_capacity(t.len() * features);
    for &step in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), features), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    null_text: Tensor,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res_down: ResBlock,
    down: Conv2d,
    res_low: ResBlock,
    res_mid: ResBlock,
    attn: CrossAttention,
    up: Conv2d,
    res_up: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(config: &DenoiserConfig, store: ParamStore, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let vb = store.var_builder(dtype, device);
        let [w0, w1] = config.widths;
        let lc = config.latent_channels;
        let null_text = vb.get_with_hints((1, config.text_dim), "null_text", Init::Randn { mean: 0.0, stdev: 1.0 })?;
        let me = Self {
            config: config.clone(),
            null_text,
            time1: linear(config.time_features, config.time_dim, vb.pp("time1"))?,
            time2: linear(config.time_dim, config.time_dim, vb.pp("time2"))?,
            conv_in: conv3(2 * lc, w0, 1, vb.pp("conv_in"))?,
            res_down: ResBlock::new(w0, w0, config, vb.pp("res_down"))?,
            down: conv3(w0, w0, 2, vb.pp("down"))?,
            res_low: ResBlock::new(w0, w1, config, vb.pp("res_low"))?,
            res_mid: ResBlock::new(w1, w1, config, vb.pp("res_mid"))?,
            attn: CrossAttention::new(w1, config, vb.pp("attn"))?,
            up: conv3(w1, w0, 1, vb.pp("up"))?,
            res_up: ResBlock::new(2 * w0, w0, config, vb.pp("res_up"))?,
            norm_out: group_norm(config.groups, w0, 1e-5, vb.pp("norm_out"))?,
            conv_out: conv3(w0, lc, 1, vb.pp("conv_out"))?,
            store: store.clone(),
        };
        store.seal();
        Ok(me)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// The learned unconditional text embedding, `(1, text_dim)`.
    pub fn null_text(&self) -> &Tensor {
        &self.null_text
    }

    pub fn dtype(&self) -> DType {
        self.null_text.dtype()
    }

    pub fn device(&self) -> &Device {
        self.null_text.device()
    }

    /// Predicts the noise in `z_noisy`.
    ///
    /// `z_noisy`, `z_cond`: `(B, C, h, w)`; `t`: one timestep per item;
    /// `text`: `(B, L, text_dim)`.
    pub fn forward(&self, z_noisy: &Tensor, z_cond: &Tensor, t: &[f64], text: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z_noisy.dims4()?;
        if z_cond.dims() != z_noisy.dims() {
            return Err(Error::Shape(format!(
                "condition latent {:?} does not match noisy latent {:?}",
                z_cond.dims(),
                z_noisy.dims()
            )));
        }
        if c != self.config.latent_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "latent {:?} needs {} channels and even spatial size",
                z_noisy.dims(),
                self.config.latent_channels
            )));
        }
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", t.len())));
        }
        let (tb, _, td) = text.dims3()?;
        if tb != b || td != self.config.text_dim {
            return Err(Error::Shape(format!("text embedding {:?} for batch of {b}", text.dims())));
        }
        let feats = timestep_features(t, self.config.time_features, self.dtype(), self.device())?;
        let temb = self.time2.forward(&self.time1.forward(&feats)?.silu()?)?;

        let x = Tensor::cat(&[z_noisy, z_cond], 1)?;
        let x = self.conv_in.forward(&x)?;
        let skip = self.res_down.forward(&x, &temb)?;
        let x = self.down.forward(&skip)?;
        let x = self.res_low.forward(&x, &temb)?;
        let x = self.res_mid.forward(&x, &temb)?;
        let x = self.attn.forward(&x, text)?;
        let x = self.up.forward(&x.upsample_nearest2d(h, w)?)?;
        let x = Tensor::cat(&[&x, &skip], 1)?;
        let x = self.res_up.forward(&x, &temb)?;
        Ok(self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?)
    }
}
