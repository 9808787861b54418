//! Classification losses with analytic gradients.
//!
//! Both losses operate on raw logits (`[N, K]`) and return the batch-mean
//! value together with gradients with respect to the logits. KL divergence
//! returns gradients for *both* sides so callers can differentiate through
//! a produced-logits network on either side of the comparison.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor for probabilities inside logarithms.
const LOG_FLOOR: f64 = 1e-12;

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, k) = (logits.shape[0], logits.shape[1]);
    let mut out = vec![0.0; n * k];
    for ni in 0..n {
        let row = &logits.data[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[ni * k..(ni + 1) * k];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Index of the largest logit per row (ties broken toward the lower index).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, k) = (logits.shape[0], logits.shape[1]);
    (0..n)
        .map(|ni| {
            let row = &logits.data[ni * k..(ni + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Batch-mean softmax cross-entropy.
///
/// Returns `(value, d value / d logits)`; the gradient is the classic
/// `(softmax - onehot) / N`.
pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, num_classes: k });
    }
    let probs = softmax_rows(logits);
    let mut value = 0.0;
    let mut grad = probs.data.clone();
    for (ni, &label) in labels.iter().enumerate() {
        value -= probs.data[ni * k + label].max(LOG_FLOOR).ln();
        grad[ni * k + label] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    value *= inv_n;
    for g in &mut grad {
        *g *= inv_n;
    }
    Ok((value, Tensor::new(vec![n, k], grad)))
}

/// Batch-mean `KL(softmax(teacher) || softmax(student))`.
///
/// Returns `(value, d value / d teacher_logits, d value / d student_logits)`.
/// Per row, writing `p = softmax(t)`, `q = softmax(s)`,
/// `delta_j = log p_j - log q_j`, and `kl = sum_j p_j delta_j`:
///   d kl / d t_j = p_j (delta_j - kl)
///   d kl / d s_j = q_j - p_j
/// both divided by the batch size for the mean.
pub fn loss_kl(teacher_logits: &Tensor, student_logits: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let ones = vec![1.0; teacher_logits.shape[0]];
    loss_kl_weighted(teacher_logits, student_logits, &ones)
}

/// Like [`loss_kl`] but each row's divergence is scaled by `weights[i]`
/// before the batch mean; gradients are scaled accordingly.
pub fn loss_kl_weighted(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    weights: &[f64],
) -> Result<(f64, Tensor, Tensor)> {
    if teacher_logits.shape != student_logits.shape || teacher_logits.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "kl needs matching [N, K] logits, got {:?} vs {:?}",
            teacher_logits.shape, student_logits.shape
        )));
    }
    let (n, k) = (teacher_logits.shape[0], teacher_logits.shape[1]);
    if weights.len() != n {
        return Err(Error::Shape(format!("{} weights for a batch of {n}", weights.len())));
    }
    let p = softmax_rows(teacher_logits);
    let q = softmax_rows(student_logits);
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_t = vec![0.0; n * k];
    let mut grad_s = vec![0.0; n * k];
    for ni in 0..n {
        let w = weights[ni];
        let prow = &p.data[ni * k..(ni + 1) * k];
        let qrow = &q.data[ni * k..(ni + 1) * k];
        let delta: Vec<f64> = prow
            .iter()
            .zip(qrow)
            .map(|(&pj, &qj)| pj.max(LOG_FLOOR).ln() - qj.max(LOG_FLOOR).ln())
            .collect();
        let kl_row: f64 = prow.iter().zip(&delta).map(|(&pj, &d)| pj * d).sum();
        value += w * kl_row;
        for j in 0..k {
            grad_t[ni * k + j] = w * prow[j] * (delta[j] - kl_row) * inv_n;
            grad_s[ni * k + j] = w * (qrow[j] - prow[j]) * inv_n;
        }
    }
    value *= inv_n;
    Ok((
        value,
        Tensor::new(vec![n, k], grad_t),
        Tensor::new(vec![n, k], grad_s),
    ))
}
