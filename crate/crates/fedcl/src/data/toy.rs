//! Procedural image classes: a desk-scale stand-in for natural-image
//! benchmarks.
//!
//! Each class is a centered Gabor patch — a windowed sinusoidal grating —
//! whose parameters are fixed functions of the class id:
//!
//! - orientation: `pi * (c mod 8) / 8` radians (22.5-degree steps),
//! - spatial frequency: `0.21 + 0.07 * ((c / 8) mod 2)` cycles per pixel,
//! - phase: golden-angle steps `tau * frac(0.381966 * (c + 1))`,
//! - position: the image center for every class.
//!
//! Per-sample variation comes from +-1 px center jitter and Gaussian pixel
//! noise only, so each class is a tight cluster around one prototype —
//! learnable quickly, and narrow enough that a class-conditional generator
//! can cover it. Because every class occupies the same pixel support and
//! differs only in orientation/frequency/phase, sequential training on
//! disjoint class subsets overwrites the shared features — the benchmark
//! exhibits genuine catastrophic forgetting rather than the benign
//! near-orthogonal-tasks regime. Pixels are produced on the 8-bit grid
//! (`round(v * 255) / 255`) so that byte serialization is lossless.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream, uniform};
use crate::tensor::Tensor;

/// Peak amplitude of the grating around the 0.5 gray level.
const AMPLITUDE: f64 = 0.45;
/// Gaussian envelope radius in pixels, for a 16-pixel side (scaled for
/// other sizes).
const ENVELOPE_SIGMA_AT_16: f64 = 5.3;
/// Standard deviation of the additive pixel noise.
const NOISE_SIGMA: f64 = 0.04;

/// Deterministic procedural dataset: `num_classes * per_class` images of
/// shape `input_shape = [channels, side, side]`, pixel values in `[0, 1]`
/// on the 8-bit grid.
pub fn generate_toy_dataset(
    num_classes: usize,
    per_class: usize,
    input_shape: &[usize],
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || per_class == 0 {
        return Err(Error::InvalidArg(
            "toy dataset needs at least one class and one sample per class".into(),
        ));
    }
    if input_shape.len() != 3 || input_shape[1] != input_shape[2] || input_shape[1] < 8 {
        return Err(Error::InvalidArg(format!(
            "toy dataset expects square [channels, side, side] inputs with side >= 8, got {input_shape:?}"
        )));
    }
    let (channels, side) = (input_shape[0], input_shape[1]);
    let sigma = ENVELOPE_SIGMA_AT_16 * side as f64 / 16.0;
    let mut rng = stream(seed, "data");

    let mut samples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let base_cx = (side as f64 - 1.0) / 2.0;
        let base_cy = (side as f64 - 1.0) / 2.0;
        let theta = std::f64::consts::PI * (class % 8) as f64 / 8.0;
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        let freq = 0.21 + 0.07 * ((class / 8) % 2) as f64;
        let phase = std::f64::consts::TAU * (0.381966 * (class + 1) as f64).fract();
        for _ in 0..per_class {
            let cx = base_cx + uniform(&mut rng, -1.0, 1.0);
            let cy = base_cy + uniform(&mut rng, -1.0, 1.0);
            let mut data = Vec::with_capacity(channels * side * side);
            for _ in 0..channels {
                for y in 0..side {
                    for x in 0..side {
                        let dx = x as f64 - cx;
                        let dy = y as f64 - cy;
                        let envelope = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        let along = dx * cos_t + dy * sin_t;
                        let wave = (std::f64::consts::TAU * freq * along + phase).cos();
                        let noise = NOISE_SIGMA * standard_normal(&mut rng);
                        let v = (0.5 + AMPLITUDE * envelope * wave + noise).clamp(0.0, 1.0);
                        data.push((v * 255.0).round() / 255.0);
                    }
                }
            }
            samples.push((Tensor::new(vec![channels, side, side], data), class));
        }
    }
    LabeledDataset::new(samples, num_classes)
}
