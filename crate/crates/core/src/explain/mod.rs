//! Grad-CAM attention maps and heatmap overlays.

mod colormap;

pub use colormap::COLORMAP;

use thiserror::Error;

use crate::classifier::{Classifier, ClassifierError, NUM_CLASSES, STAGE_CHANNELS};
use crate::imaging::pnm::RgbImage;
use crate::imaging::{quantize_value, resize, GrayImage, ImagingError, ResampleFilter};
use crate::nngraph::{NnError, Tape, Var};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("layer error: {0}")]
    Layer(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Tape handles for one explained forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CamForward {
    /// Activation of the target layer, shape `[1, K, H, W]`.
    pub activation: Var,
    /// Pre-softmax class scores, shape `[1, C]`.
    pub logits: Var,
}

/// A model whose intermediate spatial activations can be explained.
pub trait CamModel {
    /// Records the forward pass of `image` on `tape`. The activation must
    /// depend on a `requires_grad` leaf so that its gradient is recorded.
    fn cam_forward(&self, tape: &mut Tape, image: &GrayImage, layer: usize) -> Result<CamForward, ExplainError>;
}

/// Explains the output of one backbone stage (`0..4`, last stage by
/// default). Stage indices are distinct from freeze-policy layer indices.
impl CamModel for Classifier {
    fn cam_forward(&self, tape: &mut Tape, image: &GrayImage, layer: usize) -> Result<CamForward, ExplainError> {
        if layer >= STAGE_CHANNELS.len() {
            return Err(ExplainError::Layer(format!(
                "layer {layer} is not spatial; choose a backbone stage in 0..{}",
                STAGE_CHANNELS.len()
            )));
        }
        let bound = self.params().bind(tape, |_| false);
        let x = tape.leaf(self.batch_tensor([image])?, true);
        let out = self.forward(tape, &bound, x)?;
        Ok(CamForward {
            activation: out.stages[layer],
            logits: out.logits,
        })
    }
}

pub const DEFAULT_LAYER: usize = STAGE_CHANNELS.len() - 1;

/// Non-negative attention weights at the explained layer's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
    pub class: usize,
    pub layer: usize,
}

impl CamMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    pub fn to_image(&self) -> Result<GrayImage, ExplainError> {
        Ok(GrayImage::new(self.width, self.height, self.weights.clone())?)
    }
}

/// Gradient-weighted class activation map for `class` at `layer`:
/// `relu(Σ_k α_k A^k)` with `α_k` the spatial mean of `∂y_c/∂A^k`, scaled so
/// the maximum is 1 whenever any weight is positive.
pub fn grad_cam(model: &dyn CamModel, image: &GrayImage, class: usize, layer: usize) -> Result<CamMap, ExplainError> {
    if class >= NUM_CLASSES {
        return Err(ExplainError::Parameter(format!("class {class} outside 0..{NUM_CLASSES}")));
    }
    let mut tape = Tape::new();
    let fwd = model.cam_forward(&mut tape, image, layer)?;
    let (k, h, w) = match *tape.value(fwd.activation).shape() {
        [1, k, h, w] => (k, h, w),
        ref other => {
            return Err(ExplainError::Layer(format!(
                "layer {layer} activation has shape {other:?}, expected [1, K, H, W]"
            )))
        }
    };
    let classes = tape.value(fwd.logits).shape().get(1).copied().unwrap_or(0);
    if class >= classes {
        return Err(ExplainError::Parameter(format!("class {class} outside 0..{classes}")));
    }
    let score = tape.pick_class(fwd.logits, class)?;
    let grads = tape.backward(score)?;
    let activation = tape.value(fwd.activation).data();
    let plane = h * w;
    let mut weights = vec![0.0; plane];
    if let Some(g) = grads.get(fwd.activation) {
        for ch in 0..k {
            let range = ch * plane..(ch + 1) * plane;
            let alpha = g.data()[range.clone()].iter().sum::<f64>() / plane as f64;
            for (m, a) in weights.iter_mut().zip(&activation[range]) {
                *m += alpha * a;
            }
        }
    }
    for m in weights.iter_mut() {
        *m = m.max(0.0);
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        weights.iter_mut().for_each(|m| *m /= max);
    }
    Ok(CamMap {
        width: w,
        height: h,
        weights,
        class,
        layer,
    })
}

/// Blends the grayscale image with the colour-mapped CAM:
/// `(1 - blend) * gray + blend * colormap(cam)` per channel, after bilinear
/// upsampling of the CAM to the image size.
pub fn overlay(image: &GrayImage, cam: &CamMap, blend: f64) -> Result<RgbImage, ExplainError> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(ExplainError::Parameter(format!("blend {blend} outside [0, 1]")));
    }
    let (width, height) = image.dimensions();
    let heat = resize(&cam.to_image()?, width, height, ResampleFilter::Bilinear)?;
    let gray = image.quantize();
    let mut data = Vec::with_capacity(width * height * 3);
    for (&g, &v) in gray.iter().zip(heat.pixels()) {
        let color = COLORMAP[quantize_value(v) as usize];
        for c in color {
            let mixed = (1.0 - blend) * f64::from(g) + blend * f64::from(c);
            data.push(mixed.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbImage { width, height, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngraph::Tensor;

    /// One channel equal to a constant image; the class score is the mean
    /// activation times `gain`.
    struct Uniform {
        gain: f64,
    }

    impl CamModel for Uniform {
        fn cam_forward(&self, tape: &mut Tape, image: &GrayImage, _layer: usize) -> Result<CamForward, ExplainError> {
            let (w, h) = image.dimensions();
            let x = tape.leaf(Tensor::new(&[1, 1, h, w], image.pixels().to_vec())?, true);
            let pooled = tape.global_avg_pool(x)?;
            let logits = tape.concat(pooled, pooled, 1)?;
            let logits = tape.concat(logits, logits, 1)?;
            let logits = tape.concat(logits, pooled, 1)?;
            let logits = tape.scale(logits, self.gain);
            Ok(CamForward { activation: x, logits })
        }
    }

    #[test]
    fn constant_case_is_all_ones() {
        let img = GrayImage::filled(4, 4, 0.7).unwrap();
        let cam = grad_cam(&Uniform { gain: 2.0 }, &img, 1, 0).unwrap();
        assert_eq!(cam.weights, vec![1.0; 16]);
    }

    #[test]
    fn zero_gradient_gives_zero_map() {
        let img = GrayImage::filled(4, 4, 0.7).unwrap();
        let cam = grad_cam(&Uniform { gain: 0.0 }, &img, 1, 0).unwrap();
        assert!(cam.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn parameter_and_layer_errors() {
        let model = Classifier::new(16, 0).unwrap();
        let img = GrayImage::filled(16, 16, 0.5).unwrap();
        assert!(matches!(grad_cam(&model, &img, 5, 3), Err(ExplainError::Parameter(_))));
        assert!(matches!(grad_cam(&model, &img, 0, 4), Err(ExplainError::Layer(_))));
        let cam = grad_cam(&model, &img, 2, DEFAULT_LAYER).unwrap();
        assert_eq!((cam.width, cam.height), (2, 2));
        assert!(overlay(&img, &cam, 1.5).is_err());
        assert!(overlay(&img, &cam, -0.1).is_err());
    }

    #[test]
    fn blend_extremes() {
        let img = GrayImage::from_fn(6, 5, |x, y| (x * 5 + y) as f64 / 30.0).unwrap();
        let cam = CamMap {
            width: 2,
            height: 2,
            weights: vec![1.0; 4],
            class: 0,
            layer: 0,
        };
        let plain = overlay(&img, &cam, 0.0).unwrap();
        let gray = img.quantize();
        for (i, px) in plain.data.chunks(3).enumerate() {
            assert_eq!(px, [gray[i]; 3]);
        }
        let hot = overlay(&img, &cam, 1.0).unwrap();
        assert!(hot.data.chunks(3).all(|px| px == COLORMAP[255]));
        assert_eq!((hot.width, hot.height), (6, 5));
    }

    #[test]
    fn colormap_runs_blue_to_red() {
        assert!(COLORMAP[0][2] > COLORMAP[0][0]);
        assert!(COLORMAP[255][0] > COLORMAP[255][2]);
    }
}
