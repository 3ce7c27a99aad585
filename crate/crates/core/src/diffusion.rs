//! DDPM noise schedule, forward noising, the noise-prediction loss and a
//! guided deterministic DDIM sampler.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::colorspace::PixelImage;
use crate::error::{Error, Result};
use crate::model::{LatentTensor, ModelBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("timestep {t} outside 0..{}", self.len())))
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end`.
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// Schedule settings. With `reference_timesteps` set, the beta range is
/// multiplied by `reference_timesteps / timesteps`, so a short schedule
/// destroys about as much signal as the reference-length one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub reference_timesteps: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            reference_timesteps: Some(1000),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let k = match self.reference_timesteps {
            Some(r) if self.timesteps > 0 => r as f64 / self.timesteps as f64,
            _ => 1.0,
        };
        make_schedule(self.timesteps, self.beta_start * k, self.beta_end * k)
    }
}

/// Classifier-free guidance scales and training-time conditioning dropout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub s_text: f64,
    pub s_image: f64,
    pub cond_drop_text: f64,
    pub cond_drop_image: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_text: 2.0,
            s_image: 1.5,
            cond_drop_text: 0.05,
            cond_drop_image: 0.05,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("s_text", self.s_text), ("s_image", self.s_image)] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {s} must be finite and >= 0")));
            }
        }
        for (name, p) in [("cond_drop_text", self.cond_drop_text), ("cond_drop_image", self.cond_drop_image)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} must be in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// `e_uncond + s_image·(e_img − e_uncond) + s_text·(e_full − e_img)`.
///
/// Evaluated as `s_text·e_full + (s_image − s_text)·e_img + (1 − s_image)·e_uncond`,
/// which returns `e_full` bit-for-bit when both scales are 1.
pub fn combine_guidance(e_uncond: &Tensor, e_img: &Tensor, e_full: &Tensor, g: &GuidanceConfig) -> Result<Tensor> {
    let full = (e_full * g.s_text)?;
    let img = (e_img * (g.s_image - g.s_text))?;
    let uncond = (e_uncond * (1.0 - g.s_image))?;
    Ok(((full + img)? + uncond)?)
}

fn per_item(values: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1, 1), device)?.to_dtype(dtype)?)
}

/// `√ᾱₜ·z0 + √(1−ᾱₜ)·eps`, with one timestep per batch item.
pub fn q_sample(z0: &LatentTensor, t: &[usize], eps: &LatentTensor, sched: &NoiseSchedule) -> Result<LatentTensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims())));
    }
    let b = z0.tensor().dim(0)?;
    if t.len() != b {
        return Err(Error::Shape(format!("{} timesteps for batch of {b}", t.len())));
    }
    let ab = t.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    let (dt, dev) = (z0.tensor().dtype(), z0.tensor().device());
    let signal = per_item(&ab.iter().map(|a| a.sqrt()).collect::<Vec<_>>(), dt, dev)?;
    let noise = per_item(&ab.iter().map(|a| (1.0 - a).sqrt()).collect::<Vec<_>>(), dt, dev)?;
    Ok(LatentTensor(
        (z0.tensor().broadcast_mul(&signal)? + eps.tensor().broadcast_mul(&noise)?)?,
    ))
}

/// Unit Gaussian values from a seeded stream.
pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// One training batch in latent space.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// Clean color latents `(B, C, h, w)`.
    pub z0: Tensor,
    /// Grayscale condition latents, same shape.
    pub z_cond: Tensor,
    /// Prompt embeddings `(B, L, D)`.
    pub text: Tensor,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.z0.dims().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The random choices behind one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraws {
    pub t: Vec<usize>,
    pub drop_text: Vec<bool>,
    pub drop_image: Vec<bool>,
    /// Row-major noise with the shape of `z0`.
    pub eps: Vec<f64>,
}

impl LossDraws {
    /// Per item: a uniform timestep and the two dropout coins; then the noise.
    pub fn draw(rng: &mut impl Rng, batch: usize, numel: usize, sched: &NoiseSchedule, g: &GuidanceConfig) -> Self {
        let mut t = Vec::with_capacity(batch);
        let mut drop_text = Vec::with_capacity(batch);
        let mut drop_image = Vec::with_capacity(batch);
        for _ in 0..batch {
            t.push(rng.random_range(0..sched.len()));
            drop_text.push(rng.random::<f64>() < g.cond_drop_text);
            drop_image.push(rng.random::<f64>() < g.cond_drop_image);
        }
        Self {
            t,
            drop_text,
            drop_image,
            eps: gaussian(rng, numel),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingLoss {
    /// Scalar loss attached to the denoiser's graph.
    pub loss: Tensor,
    pub value: f64,
    pub draws: LossDraws,
}

/// Noise-prediction MSE with random timesteps and conditioning dropout.
/// Call `backward()` on the returned loss for gradients; frozen components
/// hold no variables and therefore receive none.
pub fn training_loss(
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    batch: &TrainingBatch,
    g: &GuidanceConfig,
    rng: &mut impl Rng,
) -> Result<TrainingLoss> {
    g.validate()?;
    let draws = LossDraws::draw(rng, batch.len(), batch.z0.elem_count(), sched, g);
    training_loss_with(bundle, sched, batch, draws)
}

/// [`training_loss`] with the random choices supplied by the caller.
pub fn training_loss_with(
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    batch: &TrainingBatch,
    draws: LossDraws,
) -> Result<TrainingLoss> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.z_cond.dims() != batch.z0.dims() || batch.text.dim(0)? != b {
        return Err(Error::Shape(format!(
            "batch z0 {:?}, z_cond {:?}, text {:?}",
            batch.z0.dims(),
            batch.z_cond.dims(),
            batch.text.dims()
        )));
    }
    if draws.t.len() != b || draws.eps.len() != batch.z0.elem_count() {
        return Err(Error::Shape("loss draws do not match the batch".into()));
    }
    let (dt, dev) = (batch.z0.dtype(), batch.z0.device());
    let eps = Tensor::from_vec(draws.eps.clone(), batch.z0.dims(), dev)?.to_dtype(dt)?;
    let z_noisy = q_sample(&LatentTensor(batch.z0.clone()), &draws.t, &LatentTensor(eps.clone()), sched)?;

    let flags = |v: &[bool]| -> Result<Tensor> {
        let f: Vec<f64> = v.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(f, (b, 1, 1), dev)?.to_dtype(dt)?)
    };
    let text = if draws.drop_text.iter().any(|&d| d) {
        let m = flags(&draws.drop_text)?;
        let keep = (1.0 - &m)?;
        (batch.text.broadcast_mul(&keep)? + bundle.null_text(b)?.broadcast_mul(&m)?)?
    } else {
        batch.text.clone()
    };
    let z_cond = if draws.drop_image.iter().any(|&d| d) {
        let keep = (1.0 - flags(&draws.drop_image)?.unsqueeze(D::Minus1)?)?;
        batch.z_cond.broadcast_mul(&keep)?
    } else {
        batch.z_cond.clone()
    };

    let pred = bundle.denoise_predict(&z_noisy, &LatentTensor(z_cond), &draws.t, &text)?;
    let loss = (pred.tensor() - &eps)?.sqr()?.mean_all()?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::Divergence {
            step: bundle.step,
            detail: format!(
                "loss {value} with timesteps {:?}, text dropped {:?}, image dropped {:?}, max |z0| {}",
                draws.t,
                draws.drop_text,
                draws.drop_image,
                batch.z0.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?
            ),
        });
    }
    Ok(TrainingLoss { loss, value, draws })
}

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Clamp each step's clean-latent estimate to `[-c, c]` (latents are
    /// scaled to unit variance). Without it, noise-prediction errors at the
    /// first steps are amplified by up to `1 / sqrt(alpha_bar)`.
    pub clip_x0: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            clip_x0: Some(3.0),
        }
    }
}

impl SamplerConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        sampling_timesteps(sched, self.steps)?;
        if let Some(c) = self.clip_x0 {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidArgument(format!("clip_x0 {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// The evenly strided, descending timesteps visited by the sampler.
pub fn sampling_timesteps(sched: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    let n = sched.len();
    if steps == 0 || steps > n {
        return Err(Error::InvalidArgument(format!("sampler steps {steps} must be in 1..={n}")));
    }
    let stride = n / steps;
    Ok((0..steps).map(|k| n - 1 - k * stride).collect())
}

/// Colorizes one grayscale image. See [`sample_batch`].
pub fn sample(
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    gray: &PixelImage,
    prompt: &str,
    g: &GuidanceConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<PixelImage> {
    Ok(sample_batch(bundle, sched, &[gray], &[prompt], g, sampler, &[seed])?.remove(0))
}

/// Deterministic DDIM sampling with three-way guidance.
///
/// Each image starts from Gaussian noise seeded by its own seed, so results
/// do not depend on how images are batched.
pub fn sample_batch(
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    grays: &[&PixelImage],
    prompts: &[&str],
    g: &GuidanceConfig,
    sampler: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<PixelImage>> {
    g.validate()?;
    sampler.validate(sched)?;
    let b = grays.len();
    if b == 0 || prompts.len() != b || seeds.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{b} images, {} prompts, {} seeds",
            prompts.len(),
            seeds.len()
        )));
    }
    let timesteps = sampling_timesteps(sched, sampler.steps)?;
    let z_cond = bundle.encode_images(grays)?;
    let (dt, dev) = (bundle.dtype(), bundle.device().clone());
    let dims = z_cond.dims().to_vec();
    let per = dims[1..].iter().product::<usize>();
    let mut noise = Vec::with_capacity(b * per);
    for &s in seeds {
        noise.extend(gaussian(&mut ChaCha8Rng::seed_from_u64(s), per));
    }
    let mut x = Tensor::from_vec(noise, dims.as_slice(), &dev)?.to_dtype(dt)?;

    let texts = prompts.iter().map(|p| bundle.encode_text(p)).collect::<Result<Vec<_>>>()?;
    let text = bundle.stack_text(&texts.iter().collect::<Vec<_>>())?;
    let null = bundle.null_text(b)?.detach();
    let text3 = Tensor::cat(&[&null, &null, &text], 0)?;
    let zc = z_cond.tensor();
    let cond3 = LatentTensor(Tensor::cat(&[&zc.zeros_like()?, zc, zc], 0)?);

    for (k, &t) in timesteps.iter().enumerate() {
        let x3 = LatentTensor(Tensor::cat(&[&x, &x, &x], 0)?);
        let e = bundle.denoise_predict(&x3, &cond3, &vec![t; 3 * b], &text3)?.0.detach();
        let e = combine_guidance(&e.narrow(0, 0, b)?, &e.narrow(0, b, b)?, &e.narrow(0, 2 * b, b)?, g)?;
        let ab = sched.alpha_bar(t)?;
        let ab_prev = match timesteps.get(k + 1) {
            Some(&tp) => sched.alpha_bar(tp)?,
            None => 1.0,
        };
        let mut x0 = ((&x - (&e * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        let mut e = e;
        if let Some(c) = sampler.clip_x0 {
            x0 = x0.clamp(-c, c)?;
            // Keep the noise estimate consistent with the clamped latent.
            e = ((&x - (&x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
        }
        x = ((x0 * ab_prev.sqrt())? + (e * (1.0 - ab_prev).sqrt())?)?;
        let finite = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteLatent { step: k });
        }
    }
    bundle.decode_latents(&LatentTensor(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0 - 0.3]);
    }

    #[test]
    fn constant_schedule() {
        let s = make_schedule(7, 0.01, 0.01).unwrap();
        assert!(s.betas().iter().all(|b| *b == 0.01));
    }

    #[test]
    fn invalid_schedules() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        let too_hot = ScheduleConfig {
            timesteps: 10,
            beta_end: 0.02,
            ..Default::default()
        };
        assert!(too_hot.build().is_err());
    }

    #[test]
    fn sampling_timesteps_stride() {
        let s = ScheduleConfig::default().build().unwrap();
        let ts = sampling_timesteps(&s, 20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 199);
        assert_eq!(ts[19], 9);
        assert_eq!(sampling_timesteps(&s, 1).unwrap(), vec![199]);
        assert!(sampling_timesteps(&s, 0).is_err());
        assert!(sampling_timesteps(&s, 201).is_err());
    }

    #[test]
    fn guidance_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        let bad = GuidanceConfig {
            cond_drop_text: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GuidanceConfig {
            s_image: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn q_sample_rejects_bad_input() {
        let s = make_schedule(10, 1e-3, 0.02).unwrap();
        let z = LatentTensor(Tensor::zeros((2, 4, 2, 2), DType::F32, &Device::Cpu).unwrap());
        let e = LatentTensor(Tensor::zeros((2, 4, 2, 3), DType::F32, &Device::Cpu).unwrap());
        assert!(q_sample(&z, &[1, 2], &e, &s).is_err());
        assert!(q_sample(&z, &[1], &z, &s).is_err());
        assert!(q_sample(&z, &[1, 10], &z, &s).is_err());
    }
}
