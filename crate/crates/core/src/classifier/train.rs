use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backbone_layer, is_metadata, Classifier, ClassifierError, Labeled, BACKBONE_LAYERS, NUM_CLASSES};
use crate::nngraph::{Adam, AdamConfig, Tape};

/// Epoch counts and optimizer settings for the two fine-tuning stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainProtocol {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainProtocol {
    fn default() -> Self {
        Self {
            stage1_epochs: 5,
            stage2_epochs: 5,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainProtocol {
    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }
}

/// How many trailing backbone layers stage 2 unfreezes. Layers are indexed
/// `0..BACKBONE_LAYERS` in forward order (conv then norm for each stage).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezePolicy {
    pub unfreeze_last: usize,
}

impl Default for FreezePolicy {
    /// The last conv stage (its conv and norm layers).
    fn default() -> Self {
        Self { unfreeze_last: 2 }
    }
}

impl FreezePolicy {
    /// Reference value used for full-scale backbones.
    pub const FULL_SCALE_LAYERS: usize = 15;

    pub fn effective(&self) -> usize {
        if self.unfreeze_last > BACKBONE_LAYERS {
            log::warn!(
                "unfreeze_last {} exceeds the {BACKBONE_LAYERS} backbone layers; unfreezing all",
                self.unfreeze_last
            );
        }
        self.unfreeze_last.min(BACKBONE_LAYERS)
    }

    pub fn is_unfrozen(&self, layer: usize) -> bool {
        layer + self.effective() >= BACKBONE_LAYERS
    }
}

/// Runs `epochs` of minibatch Adam on cross-entropy, updating only the
/// parameters for which `trainable(name)` holds. Returns the mean batch loss
/// of each epoch.
pub fn train_layers(
    model: &mut Classifier,
    data: &[Labeled],
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Vec<f64>, ClassifierError> {
    if data.is_empty() {
        return Err(ClassifierError::Training("no training examples".into()));
    }
    if batch_size == 0 {
        return Err(ClassifierError::Parameter("batch size must be at least 1".into()));
    }
    if let Some(bad) = data.iter().find(|d| d.label >= NUM_CLASSES) {
        return Err(ClassifierError::Parameter(format!("label {} outside 0..{NUM_CLASSES}", bad.label)));
    }
    let mask: Vec<bool> = model
        .params()
        .iter()
        .map(|(name, _)| !is_metadata(name) && trainable(name))
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(ClassifierError::Configuration("every parameter is frozen".into()));
    }
    // validate sizes before spending any time
    model.batch_tensor(data.iter().map(|d| &d.image))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(AdamConfig::with_learning_rate(learning_rate));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, |id| mask[id.index()]);
            let x = tape.constant(model.batch_tensor(chunk.iter().map(|&i| &data[i].image))?);
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let out = model.forward(&mut tape, &bound, x)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            total += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward(loss)?;
            let pairs: Vec<_> = bound
                .pairs()
                .filter(|(id, _)| mask[id.index()])
                .filter_map(|(id, v)| grads.get(v).map(|g| (id, g)))
                .collect();
            adam.step(model.params_mut(), pairs)?;
        }
        let mean = total / batches as f64;
        log::info!("classifier epoch {}: loss {mean:.5}", losses.len() + 1);
        losses.push(mean);
    }
    Ok(losses)
}

fn head_or_adapter(model: &Classifier, name: &str) -> bool {
    name.starts_with("lora.") || (name.starts_with("head.") && !model.is_adapted_base(name))
}

/// Stage 1: the whole backbone is frozen; the head (or its adapters, where
/// attached) is trained.
pub fn train_stage1(model: &mut Classifier, data: &[Labeled], protocol: &TrainProtocol) -> Result<Vec<f64>, ClassifierError> {
    let snapshot = model.clone();
    train_layers(
        model,
        data,
        protocol.stage1_epochs,
        protocol.batch_size,
        protocol.learning_rate,
        protocol.seed,
        &|name| head_or_adapter(&snapshot, name),
    )
}

/// Stage 2: additionally unfreezes the last `policy.unfreeze_last` backbone
/// layers.
pub fn train_stage2(
    model: &mut Classifier,
    data: &[Labeled],
    protocol: &TrainProtocol,
    policy: &FreezePolicy,
) -> Result<Vec<f64>, ClassifierError> {
    let snapshot = model.clone();
    let policy = FreezePolicy {
        unfreeze_last: policy.effective(),
    };
    train_layers(
        model,
        data,
        protocol.stage2_epochs,
        protocol.batch_size,
        protocol.learning_rate,
        protocol.seed.wrapping_add(1),
        &|name| head_or_adapter(&snapshot, name) || backbone_layer(name).is_some_and(|l| policy.is_unfrozen(l)),
    )
}

/// A backbone trained end-to-end on a proxy task.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: Classifier,
    pub losses: Vec<f64>,
    /// Accuracy on the proxy training set after the last epoch.
    pub accuracy: f64,
}

/// Trains every layer of a fresh model on `proxy`. Use
/// [`Classifier::with_fresh_head`] to carry the backbone to a new task.
pub fn pretrain_backbone(
    proxy: &[Labeled],
    input_size: usize,
    epochs: usize,
    protocol: &TrainProtocol,
) -> Result<Pretrained, ClassifierError> {
    if proxy.is_empty() {
        return Err(ClassifierError::Training("no proxy examples".into()));
    }
    let mut model = Classifier::new(input_size, protocol.seed)?;
    let losses = train_layers(
        &mut model,
        proxy,
        epochs,
        protocol.batch_size,
        protocol.learning_rate,
        protocol.seed.wrapping_add(2),
        &|_| true,
    )?;
    let accuracy = evaluate_accuracy(&model, proxy)?;
    Ok(Pretrained {
        model,
        losses,
        accuracy,
    })
}

pub fn evaluate_accuracy(model: &Classifier, data: &[Labeled]) -> Result<f64, ClassifierError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let images: Vec<_> = data.iter().map(|d| d.image.clone()).collect();
    let preds = model.classify(&images)?;
    let correct = preds.iter().zip(data).filter(|(p, d)| **p == d.label).count();
    Ok(correct as f64 / data.len() as f64)
}
