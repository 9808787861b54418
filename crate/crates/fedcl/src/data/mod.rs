//! Datasets, class-incremental task splits, and client partitioning.

pub mod idx;
pub mod partition;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{shuffle, Stream};
use crate::tensor::Tensor;

/// A labeled dataset held fully in memory. Samples keep their original
/// order; `class_index` lists the sample indices of each class.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Vec<(Tensor, usize)>,
    pub num_classes: usize,
    /// Shape of one sample, e.g. `[1, 16, 16]`.
    pub input_shape: Vec<usize>,
    pub class_index: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<(Tensor, usize)>, num_classes: usize) -> Result<LabeledDataset> {
        if samples.is_empty() {
            return Err(Error::InvalidArg("dataset must contain at least one sample".into()));
        }
        let input_shape = samples[0].0.shape.clone();
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, (x, label)) in samples.iter().enumerate() {
            if *label >= num_classes {
                return Err(Error::LabelOutOfRange { label: *label, num_classes });
            }
            if x.shape != input_shape {
                return Err(Error::Shape(format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    x.shape, input_shape
                )));
            }
            class_index[*label].push(i);
        }
        Ok(LabeledDataset { samples, num_classes, input_shape, class_index })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack the samples at `indices` into a `[N, ...]` batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        assert!(!indices.is_empty(), "cannot build an empty batch");
        let tensors: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].0).collect();
        let labels = indices.iter().map(|&i| self.samples[i].1).collect();
        (Tensor::stack(&tensors), labels)
    }
}

/// Ordered, disjoint class sets: one entry per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSplit {
    /// Classes seen once tasks `0..=task` are finished, in ascending order.
    pub fn seen_classes(&self, task: usize) -> Vec<usize> {
        let mut seen: Vec<usize> =
            self.tasks[..=task].iter().flatten().copied().collect();
        seen.sort_unstable();
        seen
    }
}

/// One client's slice of one task: indices into the parent dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub task_id: usize,
    pub indices: Vec<usize>,
}

/// Per-class split of a dataset into training and evaluation indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Holdout {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Reserve `fraction` of every class (floor, shuffled by `rng`) as a
/// held-out evaluation set; the rest is the training pool.
pub fn split_holdout(dataset: &LabeledDataset, fraction: f64, rng: &mut Stream) -> Result<Holdout> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArg(format!(
            "holdout fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class_samples in &dataset.class_index {
        let mut idx = class_samples.clone();
        shuffle(rng, &mut idx);
        let n_test = (idx.len() as f64 * fraction) as usize;
        let split = idx.len() - n_test;
        train.extend_from_slice(&idx[..split]);
        test.extend_from_slice(&idx[split..]);
    }
    Ok(Holdout { train, test })
}

/// Shuffle `indices` and chunk them into batches of `batch_size` (the last
/// batch may be smaller). One call per epoch gives epoch-wise reshuffling.
pub fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut Stream) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order = indices.to_vec();
    shuffle(rng, &mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
