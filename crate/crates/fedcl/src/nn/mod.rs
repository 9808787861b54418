//! A small, self-contained differentiable network engine.
//!
//! Models are fixed sequential stacks of layers over dense f64 tensors.
//! All parameters of a model live in one flat [`params::ParameterVector`],
//! which makes federated averaging, serialization, and optimizer state
//! trivial to express as vector arithmetic.
//!
//! The engine is split into:
//! - [`params`]: flat parameter storage, layout, initialization, serialization
//! - [`forward`]: pure forward pass producing a [`forward::Trace`]
//! - [`backward`]: reverse pass over a trace, including gradient injection
//!   at batch-norm statistics
//! - [`loss`]: softmax cross-entropy and KL divergence with gradients
//! - [`sgd`]: SGD with momentum and weight decay

pub mod backward;
pub mod forward;
pub mod loss;
pub mod params;
pub mod sgd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a sequential model.
///
/// Shapes below use `[C, H, W]` for image-like activations and `[F]` for
/// flat ones; the batch dimension is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Fully connected: `[in] -> [out]`.
    Affine { inputs: usize, outputs: usize },
    /// 2-D convolution, square kernel: `[in_ch, H, W] -> [out_ch, H', W']`
    /// with `H' = (H + 2*padding - kernel) / stride + 1`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Batch normalization over `channels` (2nd-order stats per channel for
    /// 4-D inputs, per feature for 2-D inputs).
    BatchNorm { channels: usize },
    /// Elementwise max(x, 0).
    Relu,
    /// Elementwise tanh.
    Tanh,
    /// `[C, H, W] -> [C*H*W]`.
    Flatten,
    /// `[F] -> [C, H, W]` with `F = C*H*W`.
    Reshape { channels: usize, height: usize, width: usize },
    /// Nearest-neighbor upsampling by an integer factor.
    Upsample { factor: usize },
}

/// A full sequential model: input shape plus the layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Shape of one input sample (no batch dimension).
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Whether a forward pass uses batch statistics (training) or running
/// statistics (evaluation) in batch-norm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl LayerSpec {
    /// Output shape of the layer for the given input shape, or an error when
    /// the input is incompatible.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Shape(msg));
        match *self {
            LayerSpec::Affine { inputs, outputs } => {
                if input.len() != 1 || input[0] != inputs {
                    return bad(format!(
                        "affine expects [{inputs}], got {input:?}"
                    ));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return bad(format!(
                        "conv2d expects [{in_channels}, H, W], got {input:?}"
                    ));
                }
                if kernel == 0 || stride == 0 {
                    return bad("conv2d kernel and stride must be positive".into());
                }
                let (h, w) = (input[1], input[2]);
                let h_pad = h + 2 * padding;
                let w_pad = w + 2 * padding;
                if h_pad < kernel || w_pad < kernel {
                    return bad(format!(
                        "conv2d kernel {kernel} exceeds padded input {h_pad}x{w_pad}"
                    ));
                }
                let out_h = (h_pad - kernel) / stride + 1;
                let out_w = (w_pad - kernel) / stride + 1;
                Ok(vec![out_channels, out_h, out_w])
            }
            LayerSpec::BatchNorm { channels } => {
                let ok = match input.len() {
                    1 => input[0] == channels,
                    3 => input[0] == channels,
                    _ => false,
                };
                if !ok {
                    return bad(format!(
                        "batchnorm expects [{channels}] or [{channels}, H, W], got {input:?}"
                    ));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return bad("flatten expects a non-scalar input".into());
                }
                Ok(vec![input.iter().product()])
            }
            LayerSpec::Reshape { channels, height, width } => {
                let need = channels * height * width;
                if input.len() != 1 || input[0] != need {
                    return bad(format!(
                        "reshape to [{channels}, {height}, {width}] needs [{need}], got {input:?}"
                    ));
                }
                Ok(vec![channels, height, width])
            }
            LayerSpec::Upsample { factor } => {
                if input.len() != 3 {
                    return bad(format!("upsample expects [C, H, W], got {input:?}"));
                }
                if factor == 0 {
                    return bad("upsample factor must be positive".into());
                }
                Ok(vec![input[0], input[1] * factor, input[2] * factor])
            }
        }
    }

    /// True for layers with learnable parameters.
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Affine { .. } | LayerSpec::Conv2d { .. } | LayerSpec::BatchNorm { .. }
        )
    }
}

impl ModelSpec {
    /// Validate the stack and return the shape of every activation,
    /// `shapes[0]` being the input and `shapes[layers.len()]` the output.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input_shape.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.output_shape(shapes.last().unwrap()).map_err(|e| {
                Error::Shape(format!("layer {i}: {e}"))
            })?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Shape of the model output for one sample.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.activation_shapes()?.pop().unwrap())
    }

    /// A two-block convolutional classifier for `[channels, side, side]`
    /// inputs: each block halves the spatial size via stride-2 convolution
    /// followed by batch norm and ReLU, and a final affine layer maps to
    /// `num_classes` logits. `width` is the channel count of the first block.
    pub fn conv_classifier(
        channels: usize,
        side: usize,
        width: usize,
        num_classes: usize,
    ) -> ModelSpec {
        assert!(side % 4 == 0, "input side must be divisible by 4");
        let c1 = width;
        let c2 = 2 * width;
        let s4 = side / 4;
        ModelSpec {
            input_shape: vec![channels, side, side],
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: channels,
                    out_channels: c1,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::BatchNorm { channels: c1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: c1,
                    out_channels: c2,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::BatchNorm { channels: c2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Affine {
                    inputs: c2 * s4 * s4,
                    outputs: num_classes,
                },
            ],
        }
    }
}
