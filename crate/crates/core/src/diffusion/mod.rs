//! Denoising diffusion: linear-β noise schedule, forward noising, a small
//! U-Net noise predictor and deterministic DDIM sampling.
//!
//! Images are handled in `[-1, 1]` inside this module; [`to_signed`] and
//! [`sample`] convert from and to the `[0, 1]` convention of [`GrayImage`].

mod unet;

pub use unet::{train_denoiser, DenoiserTrainConfig, TrainedDenoiser, UNet, UNetConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::imaging::{GrayImage, ImagingError};
use crate::nngraph::{NnError, Tensor};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Linear β schedule with cumulative products. Timesteps run `1..=T`;
/// `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(timesteps: usize) -> Result<NoiseSchedule, DiffusionError> {
    if timesteps == 0 {
        return Err(DiffusionError::Parameter("schedule needs at least one timestep".into()));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                BETA_START
            } else {
                BETA_START + (BETA_END - BETA_START) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.timesteps() {
            return Err(DiffusionError::Parameter(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`
pub fn forward_diffuse(schedule: &NoiseSchedule, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>, DiffusionError> {
    schedule.check_step(t)?;
    if x0.len() != noise.len() {
        return Err(DiffusionError::Parameter(format!(
            "noise has {} values, image has {}",
            noise.len(),
            x0.len()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect())
}

/// Sampling timesteps `T, T - k, ..., T - (S-1)k` with `k = floor(T / S)`.
/// The last listed step hops to the `t = 0` boundary.
pub fn ddim_subsequence(timesteps: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 || steps > timesteps {
        return Err(DiffusionError::Parameter(format!(
            "sampling steps {steps} must be in 1..={timesteps}"
        )));
    }
    let stride = timesteps / steps;
    Ok((0..steps).map(|i| timesteps - i * stride).collect())
}

/// One DDIM update from `t` to `t_prev`. `noise` is required when `eta > 0`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    eps: &[f64],
    t: usize,
    t_prev: usize,
    eta: f64,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check_step(t)?;
    if t_prev >= t {
        return Err(DiffusionError::Parameter(format!("t_prev {t_prev} must be below t {t}")));
    }
    if eta.is_nan() || eta < 0.0 {
        return Err(DiffusionError::Parameter(format!("eta must be non-negative, got {eta}")));
    }
    if eps.len() != x_t.len() {
        return Err(DiffusionError::Parameter("noise prediction length differs from x_t".into()));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let dir_sq = 1.0 - ab_prev - sigma * sigma;
    if dir_sq < -1e-12 {
        return Err(DiffusionError::Schedule(format!(
            "sigma^2 exceeds 1 - alpha_bar at t_prev={t_prev} (eta={eta})"
        )));
    }
    let dir = dir_sq.max(0.0).sqrt();
    let z = match noise {
        Some(z) if z.len() == x_t.len() => Some(z),
        Some(_) => return Err(DiffusionError::Parameter("noise length differs from x_t".into())),
        None if sigma > 0.0 => return Err(DiffusionError::Parameter("stochastic step needs noise".into())),
        None => None,
    };
    let (sqrt_ab, sqrt_one_minus) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let sqrt_prev = ab_prev.sqrt();
    Ok(x_t
        .iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (x, e))| {
            let x0 = ((x - sqrt_one_minus * e) / sqrt_ab).clamp(-1.0, 1.0);
            let mut out = sqrt_prev * x0 + dir * e;
            if let Some(z) = z {
                out += sigma * z[i];
            }
            out
        })
        .collect())
}

/// A noise predictor `ε̂(x_t, t)` over `[N, 1, H, W]` batches.
pub trait Denoiser {
    fn predict_noise(&self, x: &Tensor, timesteps: &[usize]) -> Result<Tensor, DiffusionError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRequest {
    pub count: usize,
    /// Side length of the square images.
    pub size: usize,
    pub ddim_steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SampleRequest {
    fn default() -> Self {
        Self {
            count: 1,
            size: 64,
            ddim_steps: 50,
            eta: 0.0,
            seed: 0,
        }
    }
}

const SAMPLE_CHUNK: usize = 8;

/// Runs the DDIM chain. Image `i` draws its starting noise (and any η > 0
/// noise) from its own generator seeded with `seed + i`, so results do not
/// depend on how images are batched.
pub fn sample(model: &dyn Denoiser, schedule: &NoiseSchedule, request: &SampleRequest) -> Result<Vec<GrayImage>, DiffusionError> {
    let SampleRequest {
        count,
        size,
        ddim_steps,
        eta,
        seed,
    } = *request;
    let seq = ddim_subsequence(schedule.timesteps(), ddim_steps)?;
    if size == 0 {
        return Err(DiffusionError::Parameter("image size must be positive".into()));
    }
    let pixels = size * size;
    let mut images = Vec::with_capacity(count);
    for start in (0..count).step_by(SAMPLE_CHUNK) {
        let n = SAMPLE_CHUNK.min(count - start);
        let mut rngs: Vec<ChaCha8Rng> = (start..start + n)
            .map(|i| ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)))
            .collect();
        let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|rng| normal_vec(pixels, rng)).collect();
        for (k, &t) in seq.iter().enumerate() {
            let t_prev = seq.get(k + 1).copied().unwrap_or(0);
            let batch = Tensor::new(&[n, 1, size, size], xs.concat())?;
            let eps = model.predict_noise(&batch, &vec![t; n])?;
            if eps.shape() != batch.shape() {
                return Err(DiffusionError::Model(format!(
                    "denoiser returned shape {:?} for input {:?}",
                    eps.shape(),
                    batch.shape()
                )));
            }
            for (j, x) in xs.iter_mut().enumerate() {
                let e = &eps.data()[j * pixels..(j + 1) * pixels];
                let z = (eta > 0.0).then(|| normal_vec(pixels, &mut rngs[j]));
                *x = ddim_step(schedule, x, e, t, t_prev, eta, z.as_deref())?;
            }
        }
        for x in xs {
            images.push(from_signed(size, size, &x)?);
        }
    }
    Ok(images)
}

pub(crate) fn normal_vec(n: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `[0, 1]` pixels to `[-1, 1]`.
pub fn to_signed(img: &GrayImage) -> Vec<f64> {
    img.pixels().iter().map(|p| p * 2.0 - 1.0).collect()
}

/// `[-1, 1]` values to a `[0, 1]` image, clamping.
pub fn from_signed(width: usize, height: usize, values: &[f64]) -> Result<GrayImage, DiffusionError> {
    Ok(GrayImage::from_clamped(
        width,
        height,
        values.iter().map(|v| (v + 1.0) / 2.0).collect(),
    )?)
}
