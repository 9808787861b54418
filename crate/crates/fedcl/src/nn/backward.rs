//! Reverse-mode differentiation over a forward [`Trace`].
//!
//! `backward` walks the layer stack in reverse, producing exact gradients
//! for every trainable parameter and for the input batch. Batch-norm
//! layers additionally accept *injected* gradients with respect to their
//! recorded batch mean/variance ([`BnStatGrad`]); this is how losses
//! defined directly on batch statistics (statistic-matching terms in
//! model inversion) reach the input without a separate graph.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::forward::{Trace, BN_EPS};
use crate::nn::params::{Layout, ParamKind, ParameterVector};
use crate::nn::{LayerSpec, Mode, ModelSpec};
use crate::tensor::Tensor;

/// Gradient of a scalar loss with respect to the batch mean and (biased)
/// batch variance recorded at one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnStatGrad {
    /// Index of the batch-norm layer in the model spec.
    pub layer: usize,
    pub d_mean: Vec<f64>,
    pub d_var: Vec<f64>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradient {
    /// Gradient for every parameter slot; running-statistic slots stay 0.
    pub params: ParameterVector,
    /// Gradient with respect to the input batch, for differentiating
    /// through a frozen network into whatever produced its input.
    pub input: Tensor,
}

impl Gradient {
    pub fn zeros(layout: &Layout, input_shape: Vec<usize>) -> Gradient {
        Gradient {
            params: ParameterVector::zeros(layout),
            input: Tensor::zeros(input_shape),
        }
    }

    /// `self += scale * other` over both parameter and input gradients.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        self.params.add_scaled(&other.params, scale);
        assert_eq!(self.input.shape, other.input.shape, "input gradient shape mismatch");
        for (a, b) in self.input.data.iter_mut().zip(&other.input.data) {
            *a += scale * b;
        }
    }
}

fn bn_geometry(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[1], 1),
        4 => (shape[1], shape[2] * shape[3]),
        _ => unreachable!("batch norm input must be 2-D or 4-D"),
    }
}

#[allow(clippy::too_many_arguments)]
fn affine_backward(
    x: &Tensor,
    g: &Tensor,
    w: &[f64],
    inputs: usize,
    outputs: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Tensor {
    let n = x.dim0();
    let mut dx = vec![0.0; n * inputs];
    for ni in 0..n {
        let xrow = &x.data[ni * inputs..(ni + 1) * inputs];
        let grow = &g.data[ni * outputs..(ni + 1) * outputs];
        let dxrow = &mut dx[ni * inputs..(ni + 1) * inputs];
        for (o, &go) in grow.iter().enumerate() {
            db[o] += go;
            let wrow = &w[o * inputs..(o + 1) * inputs];
            let dwrow = &mut dw[o * inputs..(o + 1) * inputs];
            for i in 0..inputs {
                dwrow[i] += go * xrow[i];
                dxrow[i] += go * wrow[i];
            }
        }
    }
    Tensor::new(vec![n, inputs], dx)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    g: &Tensor,
    w: &[f64],
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Tensor {
    let n = x.dim0();
    let (h, wid) = (x.shape[2], x.shape[3]);
    let (out_h, out_w) = (g.shape[2], g.shape[3]);
    let mut dx = vec![0.0; x.numel()];
    for ni in 0..n {
        for co in 0..out_ch {
            let w_base = co * in_ch * kernel * kernel;
            let g_base = (ni * out_ch + co) * out_h * out_w;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let go = g.data[g_base + oh * out_w + ow];
                    if go == 0.0 {
                        continue;
                    }
                    db[co] += go;
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
                                let xi = x.data[x_base + ih * wid + iw];
                                dw[wk_base + kh * kernel + kw] += go * xi;
                                dx[x_base + ih * wid + iw] += go * w[wk_base + kh * kernel + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape.clone(), dx)
}

/// Batch-norm backward. Train mode differentiates through the batch
/// statistics; eval mode treats the running statistics as constants.
/// Injected statistic gradients (`d_mean`/`d_var`) flow into the input in
/// both modes, since the recorded batch statistics are a function of the
/// input regardless of which statistics normalized it.
#[allow(clippy::too_many_arguments)]
fn batchnorm_backward(
    x: &Tensor,
    g: &Tensor,
    mode: Mode,
    batch_mean: &[f64],
    batch_var: &[f64],
    gamma: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    inject: Option<&BnStatGrad>,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor {
    let (channels, spatial) = bn_geometry(&x.shape);
    let n = x.dim0();
    let m = (n * spatial) as f64;
    let mut dx = vec![0.0; x.numel()];
    for c in 0..channels {
        let (norm_mean, norm_var) = match mode {
            Mode::Train => (batch_mean[c], batch_var[c]),
            Mode::Eval => (running_mean[c], running_var[c]),
        };
        let inv_std = 1.0 / (norm_var + BN_EPS).sqrt();

        // Parameter gradients and the sums the input gradient needs.
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        for ni in 0..n {
            let base = (ni * channels + c) * spatial;
            for s in 0..spatial {
                let gy = g.data[base + s];
                let xhat = (x.data[base + s] - norm_mean) * inv_std;
                sum_gy += gy;
                sum_gy_xhat += gy * xhat;
            }
        }
        dgamma[c] += sum_gy_xhat;
        dbeta[c] += sum_gy;

        let (inj_mean, inj_var) = match inject {
            Some(bn) => (bn.d_mean[c], bn.d_var[c]),
            None => (0.0, 0.0),
        };

        match mode {
            Mode::Train => {
                // Gradients w.r.t. the batch statistics themselves.
                // sum gy * (x - mu) = sum_gy_xhat / inv_std, so
                // d var = -1/2 (var+eps)^{-3/2} gamma sum gy (x - mu)
                //       = -1/2 inv_std^2 gamma sum_gy_xhat.
                let d_var = -0.5 * gamma[c] * inv_std * inv_std * sum_gy_xhat + inj_var;
                let d_mean = -gamma[c] * inv_std * sum_gy + inj_mean;
                for ni in 0..n {
                    let base = (ni * channels + c) * spatial;
                    for s in 0..spatial {
                        let gy = g.data[base + s];
                        let centered = x.data[base + s] - batch_mean[c];
                        dx[base + s] = gy * gamma[c] * inv_std
                            + d_var * 2.0 * centered / m
                            + d_mean / m;
                    }
                }
            }
            Mode::Eval => {
                for ni in 0..n {
                    let base = (ni * channels + c) * spatial;
                    for s in 0..spatial {
                        let gy = g.data[base + s];
                        let centered_batch = x.data[base + s] - batch_mean[c];
                        dx[base + s] = gy * gamma[c] * inv_std
                            + inj_var * 2.0 * centered_batch / m
                            + inj_mean / m;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape.clone(), dx)
}

fn upsample_backward(g: &Tensor, factor: usize, in_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (g.shape[2], g.shape[3]);
    let mut dx = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let g_base = (ni * c + ci) * oh * ow;
            let x_base = (ni * c + ci) * h * w;
            for y in 0..oh {
                for xq in 0..ow {
                    dx[x_base + (y / factor) * w + xq / factor] += g.data[g_base + y * ow + xq];
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

/// Reverse pass over `trace`, starting from `output_grad` (the gradient of
/// the scalar loss with respect to the model output).
pub fn backward(
    spec: &ModelSpec,
    layout: &Layout,
    params: &ParameterVector,
    trace: &Trace,
    output_grad: &Tensor,
    bn_stat_grads: &[BnStatGrad],
) -> Result<Gradient> {
    if output_grad.shape != trace.output().shape {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match output {:?}",
            output_grad.shape,
            trace.output().shape
        )));
    }
    let injections: HashMap<usize, &BnStatGrad> =
        bn_stat_grads.iter().map(|bn| (bn.layer, bn)).collect();

    let mut grad = ParameterVector::zeros(layout);
    let mut g = output_grad.clone();

    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let x = &trace.activations[i];
        g = match *layer {
            LayerSpec::Affine { inputs, outputs } => {
                let w_entry = layout.entry(i, ParamKind::Weight).unwrap().clone();
                let b_entry = layout.entry(i, ParamKind::Bias).unwrap().clone();
                let w: Vec<f64> = params.slice(&w_entry).to_vec();
                let mut dw = vec![0.0; w_entry.len()];
                let mut db = vec![0.0; b_entry.len()];
                let dx = affine_backward(x, &g, &w, inputs, outputs, &mut dw, &mut db);
                grad.slice_mut(&w_entry).copy_from_slice(&dw);
                grad.slice_mut(&b_entry).copy_from_slice(&db);
                dx
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let w_entry = layout.entry(i, ParamKind::Weight).unwrap().clone();
                let b_entry = layout.entry(i, ParamKind::Bias).unwrap().clone();
                let w: Vec<f64> = params.slice(&w_entry).to_vec();
                let mut dw = vec![0.0; w_entry.len()];
                let mut db = vec![0.0; b_entry.len()];
                let dx = conv2d_backward(
                    x, &g, &w, in_channels, out_channels, kernel, stride, padding, &mut dw,
                    &mut db,
                );
                grad.slice_mut(&w_entry).copy_from_slice(&dw);
                grad.slice_mut(&b_entry).copy_from_slice(&db);
                dx
            }
            LayerSpec::BatchNorm { channels } => {
                let bn = trace
                    .bn_batch(i)
                    .expect("trace holds stats for every batch-norm layer");
                let gamma_entry = layout.entry(i, ParamKind::Gamma).unwrap().clone();
                let beta_entry = layout.entry(i, ParamKind::Beta).unwrap().clone();
                let gamma: Vec<f64> = params.slice(&gamma_entry).to_vec();
                let rm: Vec<f64> =
                    params.slice(layout.entry(i, ParamKind::RunningMean).unwrap()).to_vec();
                let rv: Vec<f64> =
                    params.slice(layout.entry(i, ParamKind::RunningVar).unwrap()).to_vec();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let dx = batchnorm_backward(
                    x,
                    &g,
                    trace.mode,
                    &bn.mean,
                    &bn.var,
                    &gamma,
                    &rm,
                    &rv,
                    injections.get(&i).copied(),
                    &mut dgamma,
                    &mut dbeta,
                );
                grad.slice_mut(&gamma_entry).copy_from_slice(&dgamma);
                grad.slice_mut(&beta_entry).copy_from_slice(&dbeta);
                dx
            }
            LayerSpec::Relu => Tensor::new(
                x.shape.clone(),
                x.data
                    .iter()
                    .zip(&g.data)
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect(),
            ),
            LayerSpec::Tanh => {
                let y = &trace.activations[i + 1];
                Tensor::new(
                    x.shape.clone(),
                    y.data
                        .iter()
                        .zip(&g.data)
                        .map(|(&yi, &gi)| gi * (1.0 - yi * yi))
                        .collect(),
                )
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => g.reshaped(x.shape.clone()),
            LayerSpec::Upsample { factor } => upsample_backward(&g, factor, &x.shape),
        };
        if !g.is_finite() {
            return Err(Error::NonFinite { layer: i, stage: "backward" });
        }
    }

    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    Ok(Gradient { params: grad, input: g })
}

/// Forward + cross-entropy + backward in one call: the everyday training
/// gradient. Returns the loss value, the gradient, and the trace (so the
/// caller can fold batch-norm statistics afterwards).
pub fn grad_ce(
    spec: &ModelSpec,
    layout: &Layout,
    params: &ParameterVector,
    input: &Tensor,
    labels: &[usize],
    mode: Mode,
) -> Result<(f64, Gradient, Trace)> {
    let trace = crate::nn::forward::forward(spec, layout, params, input, mode)?;
    let (value, dlogits) = crate::nn::loss::loss_ce(trace.output(), labels)?;
    let grad = backward(spec, layout, params, &trace, &dlogits, &[])?;
    Ok((value, grad, trace))
}
