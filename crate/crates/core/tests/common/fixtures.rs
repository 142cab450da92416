//! Hand-built models and images with known explanations.

use koa_core::explain::{CamForward, CamModel, CamMap, ExplainError};
use koa_core::imaging::GrayImage;
use koa_core::nngraph::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-channel activation `A = [x, 1 - x]`. Every class score is a weighted
/// sum over `A`; the score of `class` uses only the top-left quadrant, with
/// weight +1 on the first channel and -1 on the second.
pub struct QuadrantModel {
    pub size: usize,
    pub class: usize,
    pub seed: u64,
}

impl CamModel for QuadrantModel {
    fn cam_forward(&self, tape: &mut Tape, image: &GrayImage, _layer: usize) -> Result<CamForward, ExplainError> {
        let s = self.size;
        let x = tape.leaf(Tensor::new(&[1, 1, s, s], image.pixels().to_vec())?, true);
        let neg = tape.scale(x, -1.0);
        let inv = tape.add_scalar(neg, 1.0);
        let activation = tape.concat(x, inv, 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let half = s / 2;
        let kernel = Tensor::from_fn(&[5, 2, s, s], |i| {
            let (c, ch, pos) = (i / (2 * s * s), (i / (s * s)) % 2, i % (s * s));
            let (px, py) = (pos % s, pos / s);
            if c == self.class {
                match (px < half && py < half, ch) {
                    (true, 0) => 1.0,
                    (true, _) => -1.0,
                    _ => 0.0,
                }
            } else {
                rng.random_range(-0.1..0.1)
            }
        });
        let k = tape.constant(kernel);
        let scores = tape.conv2d(activation, k, 1, 0)?;
        let logits = tape.global_avg_pool(scores)?;
        Ok(CamForward { activation, logits })
    }
}

/// Bright top-left quadrant over a darker, noisy remainder.
pub fn quadrant_image(size: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = size / 2;
    GrayImage::from_fn(size, size, |x, y| {
        if x < half && y < half {
            rng.random_range(0.7..1.0)
        } else {
            rng.random_range(0.0..0.6)
        }
    })
    .unwrap()
}

/// Fraction of the map's total weight inside the top-left quadrant.
pub fn top_left_mass(cam: &CamMap) -> f64 {
    let total: f64 = cam.weights.iter().sum();
    let inside: f64 = (0..cam.height / 2)
        .flat_map(|y| (0..cam.width / 2).map(move |x| (x, y)))
        .map(|(x, y)| cam.get(x, y))
        .sum();
    inside / total
}

/// Wraps a model and adds `offset` to every logit.
pub struct Shifted<'a, M: CamModel> {
    pub inner: &'a M,
    pub offset: f64,
}

impl<M: CamModel> CamModel for Shifted<'_, M> {
    fn cam_forward(&self, tape: &mut Tape, image: &GrayImage, layer: usize) -> Result<CamForward, ExplainError> {
        let f = self.inner.cam_forward(tape, image, layer)?;
        let logits = tape.add_scalar(f.logits, self.offset);
        Ok(CamForward { activation: f.activation, logits })
    }
}

/// Image and map used for the stored overlay.
pub fn overlay_fixture() -> (GrayImage, CamMap) {
    let img = GrayImage::from_fn(24, 20, |x, y| ((x * 9 + y * 13) % 37) as f64 / 36.0).unwrap();
    let cam = CamMap {
        width: 3,
        height: 3,
        weights: vec![0.0, 0.2, 0.4, 0.1, 1.0, 0.6, 0.0, 0.3, 0.8],
        class: 2,
        layer: 3,
    };
    (img, cam)
}

/// Accuracy table of seven full-scale models on the three data variants,
/// in whole percents.
pub const PUBLISHED_TABLE: [(&str, [usize; 3]); 7] = [
    ("Xception", [52, 76, 79]),
    ("VGG16", [78, 77, 82]),
    ("ConvNeXtTiny", [72, 80, 81]),
    ("EfficientNet B3", [68, 76, 84]),
    ("Densenet 201", [60, 76, 79]),
    ("Vision Transformer", [69, 71, 72]),
    ("Swin Transformer V2", [72, 73, 73]),
];

/// Metrics over `total` balanced samples of which the first `correct` are
/// classified correctly and the rest are shifted to the next grade.
pub fn metrics_with(correct: usize, total: usize) -> koa_core::harness::Metrics {
    let labels: Vec<usize> = (0..total).map(|i| i % 5).collect();
    let preds: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| if i < correct { l } else { (l + 1) % 5 })
        .collect();
    koa_core::harness::confusion(&preds, &labels).unwrap()
}

/// Report whose test accuracies reproduce [`PUBLISHED_TABLE`], inserted
/// variant-major to exercise the row grouping.
pub fn published_report() -> koa_core::harness::ExperimentReport {
    use koa_core::dataset::Variant;
    use koa_core::harness::{ExperimentReport, ExperimentRow};
    let mut report = ExperimentReport::default();
    for (col, variant) in Variant::ALL.into_iter().enumerate() {
        for (model, accs) in PUBLISHED_TABLE {
            report.push(ExperimentRow {
                model: model.to_string(),
                variant,
                test: metrics_with(accs[col], 100),
                valid: metrics_with(50, 100),
                train_size: 100,
            });
        }
    }
    report
}

/// Pretrains on the texture proxy, then runs the two-stage protocol on the
/// shape corpus (500 train, 100 test, 32×32). Returns the test accuracy and
/// the model before stage 1, after stage 1 and after stage 2.
pub fn two_stage_shapes(
    seed: u64,
) -> (
    f64,
    koa_core::classifier::Classifier,
    koa_core::classifier::Classifier,
    koa_core::classifier::Classifier,
) {
    use koa_core::classifier::{
        evaluate_accuracy, pretrain_backbone, train_stage1, train_stage2, FreezePolicy, TrainProtocol,
    };
    use koa_core::harness::synth;
    let proxy = synth::proxy_textures(60, 32, seed);
    let pre = pretrain_backbone(&proxy, 32, 4, &TrainProtocol { seed, ..Default::default() }).unwrap();
    let mut model = pre.model.with_fresh_head(seed).unwrap();
    let train = synth::shapes(100, 32, seed + 100);
    let test = synth::shapes(20, 32, seed + 200);
    let protocol = TrainProtocol { seed, ..Default::default() };
    let initial = model.clone();
    train_stage1(&mut model, &train, &protocol).unwrap();
    let after_stage1 = model.clone();
    train_stage2(&mut model, &train, &protocol, &FreezePolicy::default()).unwrap();
    (evaluate_accuracy(&model, &test).unwrap(), initial, after_stage1, model)
}

/// Low-contrast gradient: every `tile`×`tile` block ramps linearly from 0.45
/// to 0.55 in raster order.
pub fn tile_ramp_image(size: usize, tile: usize) -> GrayImage {
    let last = (tile * tile - 1) as f64;
    GrayImage::from_fn(size, size, |x, y| 0.45 + 0.1 * ((y % tile) * tile + x % tile) as f64 / last).unwrap()
}
