//! Evaluation bookkeeping: per-class accuracy checkpoints, average
//! accuracy, and forgetting measures.
//!
//! One checkpoint is recorded per completed task and covers every class
//! seen so far. All accuracies are fractions in `[0, 1]`; rendering to
//! percent happens only at output time.
//!
//! With `A_c(t)` the accuracy of class `c` at checkpoint `t` (0-based) and
//! task `j`'s classes `C_j`:
//!
//! - per-task accuracy `A(j, k)` = mean over `C_j` of `A_c(k)`
//! - average accuracy at `k` = mean over `j <= k` of `A(j, k)`
//! - per-task forgetting `f(j, k)` = mean over `C_j` of
//!   `max_{t in j..k-1} A_c(t) - A_c(k)`, clamped at 0 per class by default
//!   so backward transfer on one class cannot mask forgetting on another
//! - forgetting `F(k)` = mean over `j < k` of `f(j, k)` (defined for k >= 1)
//! - relative forgetting `R(k)` = `sum_j f(j, k) / sum_j A(j, k)` over
//!   `j < k`, undefined when the denominator is zero (total forgetting)

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::Result;
use crate::nn::forward::forward;
use crate::nn::loss::argmax_rows;
use crate::nn::params::{Layout, ParameterVector};
use crate::nn::{Mode, ModelSpec};

/// Per-class accuracy snapshots, one per completed task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyLog {
    /// Class ids of each task, in task order.
    pub task_classes: Vec<Vec<usize>>,
    /// `checkpoints[k][c]` is the accuracy of class `c` after task `k`.
    /// Classes with no test samples are absent (excluded from aggregates).
    pub checkpoints: Vec<BTreeMap<usize, f64>>,
}

impl AccuracyLog {
    pub fn new(task_classes: Vec<Vec<usize>>) -> AccuracyLog {
        AccuracyLog { task_classes, checkpoints: Vec::new() }
    }

    pub fn record(&mut self, per_class: BTreeMap<usize, f64>) {
        self.checkpoints.push(per_class);
    }

    /// Mean accuracy of task `j`'s classes at checkpoint `k`, skipping
    /// classes without measurements. `None` when nothing is measurable.
    pub fn task_accuracy(&self, j: usize, k: usize) -> Option<f64> {
        let cp = &self.checkpoints[k];
        let values: Vec<f64> =
            self.task_classes[j].iter().filter_map(|c| cp.get(c)).copied().collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    /// Per-task accuracies `A(j, k)` for `j <= k`; unmeasurable tasks are 0.
    pub fn per_task_accuracy(&self, k: usize) -> Vec<f64> {
        (0..=k).map(|j| self.task_accuracy(j, k).unwrap_or(0.0)).collect()
    }

    /// Per-task forgetting `f(j, k)`: mean over task `j`'s classes of the
    /// drop from the class's peak accuracy over checkpoints `j..k` to its
    /// accuracy at `k`. With `clamp`, per-class drops below zero count as
    /// zero.
    fn task_forgetting(&self, j: usize, k: usize, clamp: bool) -> Option<f64> {
        let mut drops = Vec::new();
        for &c in &self.task_classes[j] {
            let Some(&final_acc) = self.checkpoints[k].get(&c) else { continue };
            let peak = (j..k)
                .filter_map(|t| self.checkpoints[t].get(&c))
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            if !peak.is_finite() {
                continue;
            }
            let drop = peak - final_acc;
            drops.push(if clamp { drop.max(0.0) } else { drop });
        }
        if drops.is_empty() {
            None
        } else {
            Some(drops.iter().sum::<f64>() / drops.len() as f64)
        }
    }
}

/// Unweighted mean over tasks `j <= k` of the per-task accuracy at `k`.
pub fn average_accuracy(log: &AccuracyLog, k: usize) -> f64 {
    let values: Vec<f64> = (0..=k).filter_map(|j| log.task_accuracy(j, k)).collect();
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Average forgetting after task `k`; `None` for the first checkpoint.
pub fn forgetting_measure(log: &AccuracyLog, k: usize, clamp: bool) -> Option<f64> {
    if k < 1 || k >= log.checkpoints.len() {
        return None;
    }
    let values: Vec<f64> = (0..k).filter_map(|j| log.task_forgetting(j, k, clamp)).collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Forgetting relative to retained accuracy:
/// `sum_j f(j, k) / sum_j A(j, k)` over `j < k`. `None` when undefined,
/// including the total-forgetting case of a zero denominator.
pub fn relative_forgetting(log: &AccuracyLog, k: usize, clamp: bool) -> Option<f64> {
    if k < 1 || k >= log.checkpoints.len() {
        return None;
    }
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    let mut any = false;
    for j in 0..k {
        if let (Some(f), Some(a)) =
            (log.task_forgetting(j, k, clamp), log.task_accuracy(j, k))
        {
            numerator += f;
            denominator += a;
            any = true;
        }
    }
    if !any || denominator <= 0.0 {
        None
    } else {
        Some(numerator / denominator)
    }
}

/// All derived metrics of one run, checkpoint by checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Average accuracy per checkpoint.
    pub average_accuracy: Vec<f64>,
    /// `F(k)` per checkpoint; `None` where undefined (first checkpoint).
    pub forgetting: Vec<Option<f64>>,
    /// `R(k)` per checkpoint; `None` where undefined.
    pub relative_forgetting: Vec<Option<f64>>,
    /// `per_task[k][j]` = accuracy of task `j` at checkpoint `k`.
    pub per_task: Vec<Vec<f64>>,
}

impl MetricsReport {
    pub fn from_log(log: &AccuracyLog, clamp: bool) -> MetricsReport {
        let n = log.checkpoints.len();
        MetricsReport {
            average_accuracy: (0..n).map(|k| average_accuracy(log, k)).collect(),
            forgetting: (0..n).map(|k| forgetting_measure(log, k, clamp)).collect(),
            relative_forgetting: (0..n).map(|k| relative_forgetting(log, k, clamp)).collect(),
            per_task: (0..n).map(|k| log.per_task_accuracy(k)).collect(),
        }
    }
}

/// Per-class accuracy of `params` on the test samples of `classes`.
///
/// A class with no test samples is omitted from the result (and logged);
/// predictions use the argmax over the full output head.
pub fn evaluate(
    spec: &ModelSpec,
    layout: &Layout,
    params: &ParameterVector,
    dataset: &LabeledDataset,
    test_indices: &[usize],
    classes: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let mut correct: BTreeMap<usize, usize> = classes.iter().map(|&c| (c, 0)).collect();
    let mut totals: BTreeMap<usize, usize> = classes.iter().map(|&c| (c, 0)).collect();
    let eligible: Vec<usize> = test_indices
        .iter()
        .copied()
        .filter(|&i| correct.contains_key(&dataset.samples[i].1))
        .collect();
    for chunk in eligible.chunks(256) {
        let (x, y) = dataset.batch(chunk);
        let trace = forward(spec, layout, params, &x, Mode::Eval)?;
        let predictions = argmax_rows(trace.output());
        for (&label, &pred) in y.iter().zip(&predictions) {
            *totals.get_mut(&label).unwrap() += 1;
            if pred == label {
                *correct.get_mut(&label).unwrap() += 1;
            }
        }
    }
    let mut result = BTreeMap::new();
    for &c in classes {
        let n = totals[&c];
        if n == 0 {
            log::warn!("class {c} has no test samples; accuracy undefined");
            continue;
        }
        result.insert(c, correct[&c] as f64 / n as f64);
    }
    Ok(result)
}
