//! Closed-form stand-ins for trained models.

use koa_core::diffusion::{Denoiser, DiffusionError, NoiseSchedule};
use koa_core::nngraph::Tensor;

/// Knows the clean image `x0` and returns the exact noise that explains
/// `x_t` under the forward process: `(x_t - sqrt(ab) x0) / sqrt(1 - ab)`.
pub struct OracleDenoiser {
    pub x0: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl OracleDenoiser {
    pub fn new(x0: Vec<f64>, schedule: &NoiseSchedule) -> Self {
        let alpha_bars = (1..=schedule.timesteps())
            .map(|t| (1..=t).map(|s| 1.0 - schedule.beta(s)).product())
            .collect();
        Self { x0, alpha_bars }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(&self, x: &Tensor, timesteps: &[usize]) -> Result<Tensor, DiffusionError> {
        let per = self.x0.len();
        let mut out = Vec::with_capacity(x.len());
        for (i, &t) in timesteps.iter().enumerate() {
            let ab = self.alpha_bars[t - 1];
            let xt = &x.data()[i * per..(i + 1) * per];
            out.extend(xt.iter().zip(&self.x0).map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()));
        }
        Ok(Tensor::new(x.shape(), out)?)
    }
}
