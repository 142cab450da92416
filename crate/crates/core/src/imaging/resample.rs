use std::f64::consts::PI;

use super::{GrayImage, ImagingError};

/// Support radius of the Lanczos-3 window.
pub const LANCZOS_SUPPORT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResampleFilter {
    Nearest,
    Bilinear,
    #[default]
    Lanczos3,
}

impl ResampleFilter {
    fn support(self) -> f64 {
        match self {
            ResampleFilter::Nearest => 0.5,
            ResampleFilter::Bilinear => 1.0,
            ResampleFilter::Lanczos3 => LANCZOS_SUPPORT,
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            ResampleFilter::Nearest => {
                if (-0.5..0.5).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            ResampleFilter::Bilinear => (1.0 - x.abs()).max(0.0),
            ResampleFilter::Lanczos3 => lanczos3_kernel(x),
        }
    }
}

impl std::str::FromStr for ResampleFilter {
    type Err = ImagingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "lanczos3" | "lanczos" => Ok(Self::Lanczos3),
            other => Err(ImagingError::Parameter(format!("unknown filter {other:?}"))),
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// `sinc(x) * sinc(x / 3)` inside `|x| < 3`, zero outside.
pub fn lanczos3_kernel(x: f64) -> f64 {
    if x.abs() < LANCZOS_SUPPORT {
        sinc(x) * sinc(x / LANCZOS_SUPPORT)
    } else {
        0.0
    }
}

/// Normalized source taps for one output coordinate.
struct Taps {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

/// Per-output-sample taps along one axis. Source position is
/// `(out + 0.5) * scale - 0.5`; the kernel is stretched by the scale factor
/// when shrinking so that it acts as a low-pass filter.
fn axis_taps(in_len: usize, out_len: usize, filter: ResampleFilter) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            if filter == ResampleFilter::Nearest {
                let idx = ((o as f64 + 0.5) * scale).floor() as usize;
                return Taps {
                    indices: vec![idx.min(in_len - 1)],
                    weights: vec![1.0],
                };
            }
            let stretch = scale.max(1.0);
            let radius = filter.support() * stretch;
            let first = (center - radius).ceil() as isize;
            let last = (center + radius).floor() as isize;
            let mut indices = Vec::with_capacity((last - first + 1) as usize);
            let mut weights = Vec::with_capacity(indices.capacity());
            for i in first..=last {
                let w = filter.eval((i as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                indices.push(i.clamp(0, in_len as isize - 1) as usize);
                weights.push(w);
            }
            let sum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= sum);
            Taps { indices, weights }
        })
        .collect()
}

/// Separable resize: horizontal pass, then vertical pass, then clamp to
/// `[0, 1]`. Source indices outside the image are clamped to the border.
pub fn resize(
    img: &GrayImage,
    out_width: usize,
    out_height: usize,
    filter: ResampleFilter,
) -> Result<GrayImage, ImagingError> {
    if out_width == 0 || out_height == 0 {
        return Err(ImagingError::Parameter(format!(
            "output size {out_width}x{out_height} has a zero dimension"
        )));
    }
    let (w, h) = img.dimensions();
    let src = img.pixels();

    let col_taps = axis_taps(w, out_width, filter);
    let mut horizontal = vec![0.0; h * out_width];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (xo, taps) in col_taps.iter().enumerate() {
            horizontal[y * out_width + xo] = taps
                .indices
                .iter()
                .zip(&taps.weights)
                .map(|(&i, &wt)| row[i] * wt)
                .sum();
        }
    }

    let row_taps = axis_taps(h, out_height, filter);
    let mut out = vec![0.0; out_width * out_height];
    for (yo, taps) in row_taps.iter().enumerate() {
        let dst = &mut out[yo * out_width..(yo + 1) * out_width];
        for (&i, &wt) in taps.indices.iter().zip(&taps.weights) {
            let line = &horizontal[i * out_width..(i + 1) * out_width];
            for (d, &s) in dst.iter_mut().zip(line) {
                *d += s * wt;
            }
        }
    }
    GrayImage::from_clamped(out_width, out_height, out)
}
