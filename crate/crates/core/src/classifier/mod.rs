//! Small CNN grade classifier with staged fine-tuning and LoRA adapters on
//! the dense head.
//!
//! The backbone has four stages of conv3×3 → instance norm → ReLU → 2×2 max
//! pool (16/32/64/128 channels) followed by global average pooling. Each
//! stage contributes two parametric layers, conv and norm, giving eight
//! indexed backbone layers for freeze policies. The head is
//! dense 128→64 → ReLU → dense 64→5.

mod train;

pub use train::{
    evaluate_accuracy, pretrain_backbone, train_layers, train_stage1, train_stage2, FreezePolicy, Pretrained,
    TrainProtocol,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imaging::{GrayImage, ImagingError};
use crate::nngraph::{checkpoint, he_normal, uniform, Bound, NnError, ParamStore, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 5;
pub const STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
/// Parametric backbone layers: `(conv, norm)` for each stage.
pub const BACKBONE_LAYERS: usize = 2 * STAGE_CHANNELS.len();
pub const FEATURES: usize = 128;
pub const HIDDEN: usize = 64;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("expected a {expected}x{expected} image, got {width}x{height}")]
    InputSize { expected: usize, width: usize, height: usize },
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint does not describe a classifier: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// An image with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub image: GrayImage,
    pub label: usize,
}

/// The two dense layers of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DenseLayer {
    Hidden,
    Output,
}

impl DenseLayer {
    pub const ALL: [DenseLayer; 2] = [DenseLayer::Hidden, DenseLayer::Output];

    fn prefix(self) -> &'static str {
        match self {
            DenseLayer::Hidden => "head.fc1",
            DenseLayer::Output => "head.fc2",
        }
    }

    /// `(outputs, inputs)` of the weight matrix.
    pub fn dims(self) -> (usize, usize) {
        match self {
            DenseLayer::Hidden => (HIDDEN, FEATURES),
            DenseLayer::Output => (NUM_CLASSES, HIDDEN),
        }
    }
}

impl fmt::Display for DenseLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

impl FromStr for DenseLayer {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "head.fc1" | "hidden" | "fc1" => Ok(DenseLayer::Hidden),
            "head.fc2" | "output" | "fc2" => Ok(DenseLayer::Output),
            other => Err(ClassifierError::Parameter(format!("unknown dense layer {other:?}"))),
        }
    }
}

/// Low-rank update `s * B * A` attached to a dense layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraAdapter {
    pub layer: DenseLayer,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn a_name(&self) -> String {
        format!("lora.{}.a", self.layer)
    }

    fn b_name(&self) -> String {
        format!("lora.{}.b", self.layer)
    }

    fn alpha_name(layer: DenseLayer) -> String {
        format!("meta.lora.{layer}.alpha")
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Post-ReLU, pre-pool activation of every backbone stage.
    pub stages: Vec<Var>,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    input_size: usize,
    params: ParamStore,
    adapters: Vec<LoraAdapter>,
}

/// Index of the backbone layer a parameter belongs to, if any.
pub fn backbone_layer(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("backbone.s")?;
    let (stage, tail) = rest.split_once('.')?;
    let stage: usize = stage.parse().ok()?;
    Some(2 * stage + usize::from(tail.starts_with("norm")))
}

/// Parameters that hold configuration rather than weights.
pub fn is_metadata(name: &str) -> bool {
    name.starts_with("meta.")
}

fn add_head(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<(), ClassifierError> {
    for layer in DenseLayer::ALL {
        let (outputs, inputs) = layer.dims();
        store.add(format!("{layer}.weight"), he_normal(&[outputs, inputs], inputs, rng))?;
        store.add(format!("{layer}.bias"), Tensor::zeros(&[outputs]))?;
    }
    Ok(())
}

impl Classifier {
    /// Fresh model for square inputs of side `input_size` (a multiple of 16).
    pub fn new(input_size: usize, seed: u64) -> Result<Self, ClassifierError> {
        if input_size == 0 || !input_size.is_multiple_of(16) {
            return Err(ClassifierError::Parameter(format!(
                "input size {input_size} must be a positive multiple of 16"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.add("meta.input_size", Tensor::scalar(input_size as f64))?;
        let mut cin = 1;
        for (s, &cout) in STAGE_CHANNELS.iter().enumerate() {
            store.add(format!("backbone.s{s}.conv"), he_normal(&[cout, cin, 3, 3], cin * 9, &mut rng))?;
            store.add(format!("backbone.s{s}.norm.gamma"), Tensor::full(&[cout], 1.0))?;
            store.add(format!("backbone.s{s}.norm.beta"), Tensor::zeros(&[cout]))?;
            cin = cout;
        }
        add_head(&mut store, &mut rng)?;
        Ok(Self {
            input_size,
            params: store,
            adapters: Vec::new(),
        })
    }

    /// Keeps this model's backbone and replaces the head with a freshly
    /// initialized one. Any adapters are dropped.
    pub fn with_fresh_head(&self, seed: u64) -> Result<Self, ClassifierError> {
        let mut store = self.params.clone();
        store.remove_prefix("head.");
        store.remove_prefix("lora.");
        store.remove_prefix("meta.lora.");
        add_head(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self {
            input_size: self.input_size,
            params: store,
            adapters: Vec::new(),
        })
    }

    pub fn from_params(params: ParamStore) -> Result<Self, ClassifierError> {
        let size = params
            .by_name("meta.input_size")
            .filter(|t| t.is_scalar())
            .ok_or_else(|| ClassifierError::Checkpoint("missing meta.input_size".into()))?
            .item();
        let reference = Self::new(size as usize, 0)?;
        let mut adapters = Vec::new();
        for layer in DenseLayer::ALL {
            if let Some(alpha) = params.by_name(&LoraAdapter::alpha_name(layer)) {
                let a = params
                    .by_name(&format!("lora.{layer}.a"))
                    .ok_or_else(|| ClassifierError::Checkpoint(format!("adapter on {layer} lacks A")))?;
                adapters.push(LoraAdapter {
                    layer,
                    rank: a.shape()[0],
                    alpha: alpha.item(),
                });
            }
        }
        let mut expected = reference.clone();
        for adapter in &adapters {
            expected.apply_lora_with_alpha(adapter.layer, adapter.rank, adapter.alpha, 0)?;
        }
        if expected.params.len() != params.len() {
            return Err(ClassifierError::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.params.len(),
                params.len()
            )));
        }
        for (name, t) in expected.params.iter() {
            let found = params
                .by_name(name)
                .ok_or_else(|| ClassifierError::Checkpoint(format!("missing {name}")))?;
            if found.shape() != t.shape() {
                return Err(ClassifierError::Checkpoint(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    found.shape()
                )));
            }
        }
        Ok(Self {
            input_size: reference.input_size,
            params,
            adapters,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClassifierError> {
        Self::from_params(checkpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifierError> {
        Ok(checkpoint::save(&self.params, path)?)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    /// Checksum of every parameter belonging to backbone layer `layer`.
    pub fn layer_checksum(&self, layer: usize) -> u64 {
        self.params
            .iter()
            .filter(|(n, _)| backbone_layer(n) == Some(layer))
            .fold(0xcbf2_9ce4_8422_2325u64, |acc, (_, t)| (acc ^ t.checksum()).wrapping_mul(0x100_0000_01b3))
    }

    pub fn apply_lora(&mut self, layer: DenseLayer, rank: usize, seed: u64) -> Result<(), ClassifierError> {
        self.apply_lora_with_alpha(layer, rank, rank as f64, seed)
    }

    /// Attaches an adapter with `A` drawn uniformly from `±1/sqrt(n)` and
    /// `B = 0`, so the effective weight starts equal to the base weight.
    pub fn apply_lora_with_alpha(&mut self, layer: DenseLayer, rank: usize, alpha: f64, seed: u64) -> Result<(), ClassifierError> {
        let (m, n) = layer.dims();
        if rank == 0 || rank > m.min(n) {
            return Err(ClassifierError::Parameter(format!(
                "LoRA rank {rank} on {layer} must be in 1..={}",
                m.min(n)
            )));
        }
        if self.adapters.iter().any(|a| a.layer == layer) {
            return Err(ClassifierError::Parameter(format!("{layer} already has an adapter")));
        }
        let adapter = LoraAdapter { layer, rank, alpha };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params.add(adapter.a_name(), uniform(&[rank, n], 1.0 / (n as f64).sqrt(), &mut rng))?;
        self.params.add(adapter.b_name(), Tensor::zeros(&[m, rank]))?;
        self.params.add(LoraAdapter::alpha_name(layer), Tensor::scalar(alpha))?;
        self.adapters.push(adapter);
        Ok(())
    }

    /// Trainable scalars held by adapters.
    pub fn adapter_numel(&self) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with("lora.")).map(|(_, t)| t.len()).sum()
    }

    /// Folds every adapter into its base weight (`W += s * B * A`) and
    /// removes the adapters.
    pub fn merge_lora(&mut self) {
        for adapter in std::mem::take(&mut self.adapters) {
            let (m, n) = adapter.layer.dims();
            let a = self.params.by_name(&adapter.a_name()).expect("adapter A").clone();
            let b = self.params.by_name(&adapter.b_name()).expect("adapter B").clone();
            let s = adapter.scale();
            let w_id = self.params.id(&format!("{}.weight", adapter.layer)).expect("base weight");
            let w = self.params.get_mut(w_id).data_mut();
            for i in 0..m {
                for j in 0..n {
                    let delta: f64 = (0..adapter.rank).map(|k| b.data()[i * adapter.rank + k] * a.data()[k * n + j]).sum();
                    w[i * n + j] += s * delta;
                }
            }
            self.params.remove_prefix(&format!("lora.{}.", adapter.layer));
            self.params.remove_prefix(&LoraAdapter::alpha_name(adapter.layer));
        }
    }

    /// Whether `name` is a base weight currently shadowed by an adapter.
    pub fn is_adapted_base(&self, name: &str) -> bool {
        self.adapters
            .iter()
            .any(|a| name.strip_prefix(a.layer.prefix()).is_some_and(|rest| rest == ".weight" || rest == ".bias"))
    }

    fn p(&self, bound: &Bound, name: &str) -> Var {
        bound.var(self.params.id(name).unwrap_or_else(|| panic!("parameter {name} registered")))
    }

    fn dense(&self, tape: &mut Tape, bound: &Bound, x: Var, layer: DenseLayer) -> Result<Var, ClassifierError> {
        let w = self.p(bound, &format!("{layer}.weight"));
        let b = self.p(bound, &format!("{layer}.bias"));
        let y = tape.dense(x, w, Some(b))?;
        match self.adapters.iter().find(|a| a.layer == layer) {
            None => Ok(y),
            Some(adapter) => {
                let a = self.p(bound, &adapter.a_name());
                let bmat = self.p(bound, &adapter.b_name());
                let low = tape.dense(x, a, None)?;
                let delta = tape.dense(low, bmat, None)?;
                let delta = tape.scale(delta, adapter.scale());
                Ok(tape.add(y, delta)?)
            }
        }
    }

    /// Records the forward pass for a `[N, 1, S, S]` batch.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Forward, ClassifierError> {
        let mut h = x;
        let mut stages = Vec::with_capacity(STAGE_CHANNELS.len());
        for s in 0..STAGE_CHANNELS.len() {
            h = tape.conv2d(h, self.p(bound, &format!("backbone.s{s}.conv")), 1, 1)?;
            h = tape.instance_norm(
                h,
                self.p(bound, &format!("backbone.s{s}.norm.gamma")),
                self.p(bound, &format!("backbone.s{s}.norm.beta")),
            )?;
            h = tape.relu(h);
            stages.push(h);
            h = tape.max_pool2d(h, 2)?;
        }
        let features = tape.global_avg_pool(h)?;
        let hidden = self.dense(tape, bound, features, DenseLayer::Hidden)?;
        let hidden = tape.relu(hidden);
        let logits = self.dense(tape, bound, hidden, DenseLayer::Output)?;
        Ok(Forward { stages, logits })
    }

    /// Converts images to a centred `[N, 1, S, S]` batch, checking sizes.
    pub fn batch_tensor<'a>(&self, images: impl IntoIterator<Item = &'a GrayImage>) -> Result<Tensor, ClassifierError> {
        let s = self.input_size;
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            if img.dimensions() != (s, s) {
                return Err(ClassifierError::InputSize {
                    expected: s,
                    width: img.width(),
                    height: img.height(),
                });
            }
            data.extend(img.pixels().iter().map(|p| p - 0.5));
            n += 1;
        }
        Ok(Tensor::new(&[n, 1, s, s], data)?)
    }

    pub fn logits(&self, images: &[GrayImage]) -> Result<Tensor, ClassifierError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(self.batch_tensor(images)?);
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Softmax probabilities over the five grades for one image.
    pub fn predict(&self, img: &GrayImage) -> Result<[f64; NUM_CLASSES], ClassifierError> {
        Ok(self.predict_batch(std::slice::from_ref(img))?[0])
    }

    pub fn predict_batch(&self, images: &[GrayImage]) -> Result<Vec<[f64; NUM_CLASSES]>, ClassifierError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let logits = self.logits(chunk)?;
            out.extend(logits.data().chunks(NUM_CLASSES).map(softmax));
        }
        Ok(out)
    }

    /// Arg-max grade for each image.
    pub fn classify(&self, images: &[GrayImage]) -> Result<Vec<usize>, ClassifierError> {
        Ok(self.predict_batch(images)?.iter().map(|p| argmax(p)).collect())
    }
}

pub fn softmax(logits: &[f64]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}
