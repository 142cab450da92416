use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward_diffuse, normal_vec, to_signed, Denoiser, DiffusionError, NoiseSchedule};
use crate::imaging::GrayImage;
use crate::nngraph::{checkpoint, he_normal, sinusoidal_embed, Adam, AdamConfig, Bound, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Channels at the top level; the two lower levels use 2× and 4×.
    pub base_channels: usize,
    /// Width of the sinusoidal timestep embedding and the time MLP.
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            time_dim: 128,
        }
    }
}

impl UNetConfig {
    pub fn level_channels(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }
}

/// Three-level U-Net noise predictor. Each level runs two
/// conv3×3 → instance norm → SiLU blocks; the timestep embedding is projected
/// per level and added to the second block after its normalization.
/// Downsampling is 2×2 average pooling, upsampling is nearest-neighbour with
/// skip concatenation. The output adds a per-timestep linear term
/// `s(t) x + b(t)` so the image-level offset that instance norm discards
/// can still be predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
}

fn add_block(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<(), DiffusionError> {
    store.add(format!("{prefix}.conv"), he_normal(&[cout, cin, 3, 3], cin * 9, rng))?;
    store.add(format!("{prefix}.gamma"), Tensor::full(&[cout], 1.0))?;
    store.add(format!("{prefix}.beta"), Tensor::zeros(&[cout]))?;
    Ok(())
}

fn add_dense(store: &mut ParamStore, prefix: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<(), DiffusionError> {
    store.add(format!("{prefix}.weight"), he_normal(&[outputs, inputs], inputs, rng))?;
    store.add(format!("{prefix}.bias"), Tensor::zeros(&[outputs]))?;
    Ok(())
}

/// `(name, input channels, output channels)` for every level, encoder first.
fn levels(config: &UNetConfig) -> [(&'static str, usize, usize); 5] {
    let [c0, c1, c2] = config.level_channels();
    [
        ("enc0", 1, c0),
        ("enc1", c0, c1),
        ("enc2", c1, c2),
        ("dec1", c2 + c1, c1),
        ("dec0", c1 + c0, c0),
    ]
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, DiffusionError> {
        if config.base_channels == 0 || config.time_dim < 4 || !config.time_dim.is_multiple_of(2) {
            return Err(DiffusionError::Parameter(format!("invalid U-Net config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let td = config.time_dim;
        add_dense(&mut store, "time.fc1", td, td, &mut rng)?;
        add_dense(&mut store, "time.fc2", td, td, &mut rng)?;
        for (name, cin, cout) in levels(&config) {
            add_block(&mut store, &format!("{name}.block0"), cin, cout, &mut rng)?;
            add_dense(&mut store, &format!("{name}.temb"), td, cout, &mut rng)?;
            add_block(&mut store, &format!("{name}.block1"), cout, cout, &mut rng)?;
        }
        store.add("out.conv", Tensor::zeros(&[1, config.base_channels, 1, 1]))?;
        store.add("out.bias", Tensor::zeros(&[1]))?;
        for head in ["out.skip", "out.shift"] {
            store.add(format!("{head}.weight"), Tensor::zeros(&[1, td]))?;
            store.add(format!("{head}.bias"), Tensor::zeros(&[1]))?;
        }
        Ok(Self { config, params: store })
    }

    /// Rebuilds a model from stored parameters, checking every name and
    /// shape against the architecture implied by the top-level widths.
    pub fn from_params(params: ParamStore) -> Result<Self, DiffusionError> {
        let dim = |name: &str, axis: usize| {
            params
                .by_name(name)
                .and_then(|t| t.shape().get(axis).copied())
                .ok_or_else(|| DiffusionError::Model(format!("missing parameter {name}")))
        };
        let config = UNetConfig {
            base_channels: dim("enc0.block0.conv", 0)?,
            time_dim: dim("time.fc1.weight", 0)?,
        };
        let reference = Self::new(config, 0)?;
        if reference.params.len() != params.len() {
            return Err(DiffusionError::Model(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            match params.by_name(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(DiffusionError::Model(format!(
                        "{name}: expected shape {:?}, found {:?}",
                        t.shape(),
                        p.shape()
                    )))
                }
                None => return Err(DiffusionError::Model(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DiffusionError> {
        Self::from_params(checkpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DiffusionError> {
        Ok(checkpoint::save(&self.params, path)?)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn p(&self, bound: &Bound, name: &str) -> Var {
        bound.var(self.params.id(name).expect("parameter registered by UNet::new"))
    }

    fn block(&self, tape: &mut Tape, bound: &Bound, x: Var, prefix: &str, shift: Option<Var>) -> Result<Var, DiffusionError> {
        let k = self.p(bound, &format!("{prefix}.conv"));
        let h = tape.conv2d(x, k, 1, 1)?;
        let mut h = tape.instance_norm(h, self.p(bound, &format!("{prefix}.gamma")), self.p(bound, &format!("{prefix}.beta")))?;
        if let Some(v) = shift {
            h = tape.add_channel(h, v)?;
        }
        Ok(tape.silu(h))
    }

    fn dense(&self, tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Result<Var, DiffusionError> {
        let w = self.p(bound, &format!("{prefix}.weight"));
        let b = self.p(bound, &format!("{prefix}.bias"));
        Ok(tape.dense(x, w, Some(b))?)
    }

    fn level(&self, tape: &mut Tape, bound: &Bound, x: Var, temb: Var, name: &str) -> Result<Var, DiffusionError> {
        let h = self.block(tape, bound, x, &format!("{name}.block0"), None)?;
        let proj = self.dense(tape, bound, temb, &format!("{name}.temb"))?;
        self.block(tape, bound, h, &format!("{name}.block1"), Some(proj))
    }

    /// Records the forward pass for `x` of shape `[N, 1, H, W]` with `H` and
    /// `W` divisible by 4.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, timesteps: &[usize]) -> Result<Var, DiffusionError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) || shape[2] == 0 || shape[3] == 0 {
            return Err(DiffusionError::Model(format!(
                "U-Net expects [N, 1, H, W] with H, W positive multiples of 4, got {shape:?}"
            )));
        }
        if timesteps.len() != shape[0] {
            return Err(DiffusionError::Model(format!(
                "{} timesteps for a batch of {}",
                timesteps.len(),
                shape[0]
            )));
        }
        let emb = tape.constant(sinusoidal_embed(timesteps, self.config.time_dim));
        let h = self.dense(tape, bound, emb, "time.fc1")?;
        let h = tape.silu(h);
        let h = self.dense(tape, bound, h, "time.fc2")?;
        let temb = tape.silu(h);

        let skip0 = self.level(tape, bound, x, temb, "enc0")?;
        let down = tape.avg_pool2d(skip0, 2)?;
        let skip1 = self.level(tape, bound, down, temb, "enc1")?;
        let down = tape.avg_pool2d(skip1, 2)?;
        let mid = self.level(tape, bound, down, temb, "enc2")?;

        let up = tape.upsample_nearest2x(mid)?;
        let up = tape.concat(up, skip1, 1)?;
        let up = self.level(tape, bound, up, temb, "dec1")?;
        let up = tape.upsample_nearest2x(up)?;
        let up = tape.concat(up, skip0, 1)?;
        let up = self.level(tape, bound, up, temb, "dec0")?;

        let out = tape.conv2d(up, self.p(bound, "out.conv"), 1, 0)?;
        let out = tape.add_channel(out, self.p(bound, "out.bias"))?;
        let skip = self.dense(tape, bound, temb, "out.skip")?;
        let zeros = tape.constant(Tensor::zeros(&shape));
        let skip = tape.add_channel(zeros, skip)?;
        let skip = tape.mul(x, skip)?;
        let out = tape.add(out, skip)?;
        let shift = self.dense(tape, bound, temb, "out.shift")?;
        Ok(tape.add_channel(out, shift)?)
    }
}

impl Denoiser for UNet {
    fn predict_noise(&self, x: &Tensor, timesteps: &[usize]) -> Result<Tensor, DiffusionError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, input, timesteps)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub unet: UNetConfig,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            unet: UNetConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub model: UNet,
    /// Mean batch loss of each epoch.
    pub losses: Vec<f64>,
}

/// Trains a fresh U-Net on `images` (all the same size, `[0, 1]` pixels) to
/// predict the noise added at a uniformly drawn timestep.
pub fn train_denoiser(
    images: &[GrayImage],
    schedule: &NoiseSchedule,
    config: &DenoiserTrainConfig,
) -> Result<TrainedDenoiser, DiffusionError> {
    let first = images
        .first()
        .ok_or_else(|| DiffusionError::Training("no training images".into()))?;
    let (w, h) = first.dimensions();
    if let Some(img) = images.iter().find(|i| i.dimensions() != (w, h)) {
        return Err(DiffusionError::Training(format!(
            "mixed image sizes {:?} and {:?}",
            (w, h),
            img.dimensions()
        )));
    }
    if config.batch_size == 0 {
        return Err(DiffusionError::Parameter("batch size must be positive".into()));
    }
    let mut model = UNet::new(config.unet, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5DEE_CE66_D1CE_F00D);
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate));
    let data: Vec<Vec<f64>> = images.iter().map(to_signed).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len() * w * h);
            let mut targets = Vec::with_capacity(chunk.len() * w * h);
            let mut ts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t = rng.random_range(1..=schedule.timesteps());
                let eps = normal_vec(w * h, &mut rng);
                inputs.extend(forward_diffuse(schedule, &data[i], t, &eps)?);
                targets.extend(eps);
                ts.push(t);
            }
            let shape = [chunk.len(), 1, h, w];
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, |_| true);
            let x = tape.constant(Tensor::new(&shape, inputs)?);
            let target = tape.constant(Tensor::new(&shape, targets)?);
            let pred = model.forward(&mut tape, &bound, x, &ts)?;
            let loss = tape.mse(pred, target)?;
            total += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward(loss)?;
            let pairs: Vec<_> = bound.pairs().filter_map(|(id, v)| grads.get(v).map(|g| (id, g))).collect();
            adam.step(&mut model.params, pairs)?;
        }
        let mean = total / batches as f64;
        log::info!("denoiser epoch {}: loss {mean:.5}", losses.len() + 1);
        losses.push(mean);
    }
    Ok(TrainedDenoiser { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;

    fn small() -> UNetConfig {
        UNetConfig {
            base_channels: 4,
            time_dim: 8,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let net = UNet::new(small(), 1).unwrap();
        let x = Tensor::from_fn(&[2, 1, 8, 12], |i| (i as f64 * 0.1).sin());
        let out = net.predict_noise(&x, &[3, 700]).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(net.predict_noise(&Tensor::zeros(&[1, 1, 6, 8]), &[1]).is_err());
        assert!(net.predict_noise(&Tensor::zeros(&[1, 1, 8, 8]), &[1, 2]).is_err());
    }

    #[test]
    fn parameter_count_is_fixed_by_config() {
        let a = UNet::new(small(), 1).unwrap();
        let b = UNet::new(small(), 2).unwrap();
        assert_eq!(a.params().numel(), b.params().numel());
        assert_ne!(a.params(), b.params());
    }

    #[test]
    fn params_round_trip_and_mismatch() {
        let net = UNet::new(small(), 3).unwrap();
        assert_eq!(UNet::from_params(net.params().clone()).unwrap(), net);
        let mut broken = net.params().clone();
        broken.remove_prefix("dec0");
        assert!(matches!(UNet::from_params(broken), Err(DiffusionError::Model(_))));
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let img = GrayImage::filled(8, 8, 0.3).unwrap();
        let schedule = build_schedule(50).unwrap();
        let config = DenoiserTrainConfig {
            epochs: 0,
            unet: small(),
            seed: 4,
            ..Default::default()
        };
        let trained = train_denoiser(&[img], &schedule, &config).unwrap();
        assert!(trained.losses.is_empty());
        assert_eq!(trained.model, UNet::new(small(), 4).unwrap());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let schedule = build_schedule(50).unwrap();
        let err = train_denoiser(&[], &schedule, &DenoiserTrainConfig::default()).unwrap_err();
        assert!(matches!(err, DiffusionError::Training(_)));
    }

    #[test]
    fn training_is_deterministic() {
        let imgs: Vec<GrayImage> = (0..3)
            .map(|k| GrayImage::from_fn(8, 8, |x, y| ((x + y + k) % 4) as f64 / 3.0).unwrap())
            .collect();
        let schedule = build_schedule(100).unwrap();
        let config = DenoiserTrainConfig {
            epochs: 2,
            batch_size: 2,
            unet: small(),
            seed: 11,
            ..Default::default()
        };
        let a = train_denoiser(&imgs, &schedule, &config).unwrap();
        let b = train_denoiser(&imgs, &schedule, &config).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model, b.model);
    }
}
