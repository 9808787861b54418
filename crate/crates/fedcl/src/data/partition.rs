//! Class-incremental task splits and client partitioning.
//!
//! Tasks are equal-sized, disjoint class sets in a seeded shuffled order.
//! Within a task, samples are spread over clients either uniformly (IID,
//! round-robin per class) or with label skew: one symmetric Dirichlet draw
//! per class decides what fraction of that class each client receives,
//! with largest-remainder rounding so counts sum exactly.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, LabeledDataset, TaskSplit};
use crate::error::{Error, Result};
use crate::rng::{sample_dirichlet, shuffle, Stream};

/// Client heterogeneity: uniform, or a Dirichlet concentration (smaller
/// values mean more skew).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Beta {
    Iid,
    Concentration(f64),
}

impl Beta {
    pub fn parse(text: &str) -> Result<Beta> {
        if text.eq_ignore_ascii_case("iid") {
            return Ok(Beta::Iid);
        }
        match text.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Beta::Concentration(v)),
            _ => Err(Error::Config(format!(
                "partition.beta must be \"iid\" or a positive number, got {text:?}"
            ))),
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Iid => write!(f, "iid"),
            Beta::Concentration(v) => write!(f, "{v}"),
        }
    }
}

/// Shuffle the class ids with `rng` and chunk them into `num_tasks` equal
/// groups, in order.
pub fn split_tasks(num_classes: usize, num_tasks: usize, rng: &mut Stream) -> Result<TaskSplit> {
    if num_tasks == 0 || num_classes == 0 {
        return Err(Error::InvalidArg("need at least one class and one task".into()));
    }
    if num_classes % num_tasks != 0 {
        return Err(Error::Config(format!(
            "{num_classes} classes cannot be divided evenly into {num_tasks} tasks"
        )));
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    shuffle(rng, &mut classes);
    let per_task = num_classes / num_tasks;
    Ok(TaskSplit {
        tasks: classes.chunks(per_task).map(|c| c.to_vec()).collect(),
    })
}

/// Split `proportions * total` into integer counts that sum to `total`
/// exactly: floor everything, then hand the leftover units to the largest
/// fractional remainders (ties to the lower index).
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(proportions.len());
    let mut assigned = 0usize;
    for (i, &p) in proportions.iter().enumerate() {
        let exact = p * total as f64;
        let base = exact.floor() as usize;
        counts.push(base);
        assigned += base;
        remainders.push((i, exact - base as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Partition the samples in `pool` (indices into `dataset`, restricted to
/// the classes of task `task_id`) across `num_clients` clients.
///
/// For every class present, in ascending class-id order, the class's pool
/// samples are dealt out either round-robin (IID) or contiguously by a
/// fresh Dirichlet draw with largest-remainder rounding. Exactly one
/// Dirichlet draw is consumed per class and nothing else, so the stream
/// position is easy to reproduce externally. Empty shards are allowed —
/// heavy skew can starve a client — and are reported by the caller.
pub fn dirichlet_partition(
    dataset: &LabeledDataset,
    pool: &[usize],
    task_id: usize,
    num_clients: usize,
    beta: Beta,
    rng: &mut Stream,
) -> Result<Vec<ClientShard>> {
    if num_clients == 0 {
        return Err(Error::InvalidArg("need at least one client".into()));
    }
    if let Beta::Concentration(v) = beta {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidArg(format!("beta must be positive, got {v}")));
        }
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for &i in pool {
        per_class[dataset.samples[i].1].push(i);
    }
    let mut shards: Vec<ClientShard> = (0..num_clients)
        .map(|client_id| ClientShard { client_id, task_id, indices: Vec::new() })
        .collect();
    for class_samples in per_class.iter().filter(|c| !c.is_empty()) {
        match beta {
            Beta::Iid => {
                for (i, &sample) in class_samples.iter().enumerate() {
                    shards[i % num_clients].indices.push(sample);
                }
            }
            Beta::Concentration(b) => {
                let proportions = sample_dirichlet(rng, b, num_clients);
                let counts = largest_remainder(&proportions, class_samples.len());
                let mut cursor = 0usize;
                for (shard, &count) in shards.iter_mut().zip(&counts) {
                    shard.indices.extend_from_slice(&class_samples[cursor..cursor + count]);
                    cursor += count;
                }
            }
        }
    }
    Ok(shards)
}
