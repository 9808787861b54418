//! Forward pass over a sequential model.
//!
//! `forward` is pure: it never mutates parameters. Batch-norm layers record
//! the batch statistics of their inputs in the returned [`Trace`] in both
//! train and eval mode — train mode normalizes with them, eval mode
//! normalizes with the stored running statistics but still reports what the
//! batch looked like (model-inversion losses match the two). Running
//! statistics only change when [`apply_bn_updates`] is called explicitly.

use crate::error::{Error, Result};
use crate::nn::params::{Layout, ParamKind, ParameterVector};
use crate::nn::{LayerSpec, Mode, ModelSpec};
use crate::tensor::Tensor;

/// Numerical floor inside the batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;

/// Default exponential-moving-average momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of one batch-norm layer's input batch.
#[derive(Debug, Clone)]
pub struct BnBatch {
    /// Index of the batch-norm layer in the model spec.
    pub layer: usize,
    pub mean: Vec<f64>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<f64>,
    /// Elements per channel that the statistics were computed over.
    pub count: usize,
}

/// Everything the forward pass produced: the input, every intermediate
/// activation, and batch-norm batch statistics.
#[derive(Debug, Clone)]
pub struct Trace {
    pub mode: Mode,
    /// `activations[0]` is the input batch; `activations[i + 1]` is the
    /// output of layer `i`.
    pub activations: Vec<Tensor>,
    /// One record per batch-norm layer, in layer order.
    pub bn_batches: Vec<BnBatch>,
}

impl Trace {
    /// Output of the last layer.
    pub fn output(&self) -> &Tensor {
        self.activations.last().unwrap()
    }

    /// Batch statistics recorded for the batch-norm layer at `layer`.
    pub fn bn_batch(&self, layer: usize) -> Option<&BnBatch> {
        self.bn_batches.iter().find(|b| b.layer == layer)
    }
}

/// Channel geometry of a batch-norm input: (channels, elements per channel
/// per sample). 2-D inputs are per-feature, 4-D are per-channel.
fn bn_geometry(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[1], 1),
        4 => (shape[1], shape[2] * shape[3]),
        _ => unreachable!("batch norm input must be 2-D or 4-D"),
    }
}

fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>, usize) {
    let (channels, spatial) = bn_geometry(&x.shape);
    let n = x.dim0();
    let count = n * spatial;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for ni in 0..n {
        for c in 0..channels {
            let base = (ni * channels + c) * spatial;
            for s in 0..spatial {
                mean[c] += x.data[base + s];
            }
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    for ni in 0..n {
        for c in 0..channels {
            let base = (ni * channels + c) * spatial;
            for s in 0..spatial {
                let d = x.data[base + s] - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= count as f64;
    }
    (mean, var, count)
}

fn affine_forward(x: &Tensor, w: &[f64], b: &[f64], inputs: usize, outputs: usize) -> Tensor {
    let n = x.dim0();
    let mut out = vec![0.0; n * outputs];
    for ni in 0..n {
        let xrow = &x.data[ni * inputs..(ni + 1) * inputs];
        let orow = &mut out[ni * outputs..(ni + 1) * outputs];
        for (o, orow_o) in orow.iter_mut().enumerate() {
            let wrow = &w[o * inputs..(o + 1) * inputs];
            let mut acc = b[o];
            for i in 0..inputs {
                acc += wrow[i] * xrow[i];
            }
            *orow_o = acc;
        }
    }
    Tensor::new(vec![n, outputs], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &Tensor,
    w: &[f64],
    b: &[f64],
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let n = x.dim0();
    let (h, wid) = (x.shape[2], x.shape[3]);
    let mut out = vec![0.0; n * out_ch * out_h * out_w];
    for ni in 0..n {
        for co in 0..out_ch {
            let w_base = co * in_ch * kernel * kernel;
            let o_base = (ni * out_ch + co) * out_h * out_w;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = b[co];
                    for ci in 0..in_ch {
                        let x_base = (ni * in_ch + ci) * h * wid;
                        let wk_base = w_base + ci * kernel * kernel;
                        for kh in 0..kernel {
                            let ih = oh * stride + kh;
                            if ih < padding || ih >= h + padding {
                                continue;
                            }
                            let ih = ih - padding;
                            for kw in 0..kernel {
                                let iw = ow * stride + kw;
                                if iw < padding || iw >= wid + padding {
                                    continue;
                                }
                                let iw = iw - padding;
                                acc += w[wk_base + kh * kernel + kw]
                                    * x.data[x_base + ih * wid + iw];
                            }
                        }
                    }
                    out[o_base + oh * out_w + ow] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, out_ch, out_h, out_w], out)
}

fn bn_normalize(x: &Tensor, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64]) -> Tensor {
    let (channels, spatial) = bn_geometry(&x.shape);
    let n = x.dim0();
    let mut out = vec![0.0; x.numel()];
    for c in 0..channels {
        let inv_std = 1.0 / (var[c] + BN_EPS).sqrt();
        let (g, bt, m) = (gamma[c], beta[c], mean[c]);
        for ni in 0..n {
            let base = (ni * channels + c) * spatial;
            for s in 0..spatial {
                out[base + s] = g * (x.data[base + s] - m) * inv_std + bt;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let i_base = (ni * c + ci) * h * w;
            let o_base = (ni * c + ci) * oh * ow;
            for y in 0..oh {
                let iy = y / factor;
                for xq in 0..ow {
                    out[o_base + y * ow + xq] = x.data[i_base + iy * w + xq / factor];
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Run the model over a batch. The input must be `[N, ...input_shape]`.
pub fn forward(
    spec: &ModelSpec,
    layout: &Layout,
    params: &ParameterVector,
    input: &Tensor,
    mode: Mode,
) -> Result<Trace> {
    if input.shape.len() != spec.input_shape.len() + 1
        || input.inner_shape() != spec.input_shape.as_slice()
    {
        return Err(Error::Shape(format!(
            "input batch {:?} does not match model input {:?}",
            input.shape, spec.input_shape
        )));
    }
    if input.dim0() == 0 {
        return Err(Error::InvalidArg("forward requires a non-empty batch".into()));
    }
    if params.len() != layout.total {
        return Err(Error::Layout(format!(
            "parameter vector has {} values, layout expects {}",
            params.len(),
            layout.total
        )));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite { layer: 0, stage: "input" });
    }

    let mut activations = Vec::with_capacity(spec.layers.len() + 1);
    activations.push(input.clone());
    let mut bn_batches = Vec::new();

    for (i, layer) in spec.layers.iter().enumerate() {
        let x = activations.last().unwrap();
        let out = match *layer {
            LayerSpec::Affine { inputs, outputs } => {
                let w = params.slice(layout.entry(i, ParamKind::Weight).unwrap());
                let b = params.slice(layout.entry(i, ParamKind::Bias).unwrap());
                affine_forward(x, w, b, inputs, outputs)
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let w = params.slice(layout.entry(i, ParamKind::Weight).unwrap());
                let b = params.slice(layout.entry(i, ParamKind::Bias).unwrap());
                let h_out = (x.shape[2] + 2 * padding - kernel) / stride + 1;
                let w_out = (x.shape[3] + 2 * padding - kernel) / stride + 1;
                conv2d_forward(
                    x, w, b, in_channels, out_channels, kernel, stride, padding, h_out, w_out,
                )
            }
            LayerSpec::BatchNorm { .. } => {
                let gamma = params.slice(layout.entry(i, ParamKind::Gamma).unwrap());
                let beta = params.slice(layout.entry(i, ParamKind::Beta).unwrap());
                let (mean, var, count) = batch_stats(x);
                let out = match mode {
                    Mode::Train => bn_normalize(x, &mean, &var, gamma, beta),
                    Mode::Eval => {
                        let rm = params.slice(layout.entry(i, ParamKind::RunningMean).unwrap());
                        let rv = params.slice(layout.entry(i, ParamKind::RunningVar).unwrap());
                        bn_normalize(x, rm, rv, gamma, beta)
                    }
                };
                bn_batches.push(BnBatch { layer: i, mean, var, count });
                out
            }
            LayerSpec::Relu => {
                Tensor::new(x.shape.clone(), x.data.iter().map(|&v| v.max(0.0)).collect())
            }
            LayerSpec::Tanh => {
                Tensor::new(x.shape.clone(), x.data.iter().map(|&v| v.tanh()).collect())
            }
            LayerSpec::Flatten => {
                let n = x.dim0();
                x.reshaped(vec![n, x.numel() / n])
            }
            LayerSpec::Reshape { channels, height, width } => {
                let n = x.dim0();
                x.reshaped(vec![n, channels, height, width])
            }
            LayerSpec::Upsample { factor } => upsample_nearest(x, factor),
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { layer: i, stage: "forward" });
        }
        activations.push(out);
    }

    Ok(Trace { mode, activations, bn_batches })
}

/// Fold the batch statistics recorded in `trace` into the running statistics
/// stored in `params` with exponential moving average `momentum`:
/// `running = (1 - momentum) * running + momentum * batch`.
///
/// Kept separate from `forward` so that passes stay pure; call it after a
/// training step when statistic tracking is wanted.
pub fn apply_bn_updates(
    params: &mut ParameterVector,
    layout: &Layout,
    trace: &Trace,
    momentum: f64,
) {
    for bn in &trace.bn_batches {
        let mean_entry = layout.entry(bn.layer, ParamKind::RunningMean).unwrap().clone();
        let var_entry = layout.entry(bn.layer, ParamKind::RunningVar).unwrap().clone();
        for (slot, &batch) in params.slice_mut(&mean_entry).iter_mut().zip(&bn.mean) {
            *slot = (1.0 - momentum) * *slot + momentum * batch;
        }
        for (slot, &batch) in params.slice_mut(&var_entry).iter_mut().zip(&bn.var) {
            *slot = (1.0 - momentum) * *slot + momentum * batch;
        }
    }
}
