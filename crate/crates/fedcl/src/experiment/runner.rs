//! Execute experiments described by an [`ExperimentConfig`]: build the
//! data, partition it, run the continual federated loop, and write
//! reproducible outputs (`config.txt`, `record.json`, `metrics.csv`,
//! `rounds.csv`) into one directory per run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::partition::{dirichlet_partition, split_tasks};
use crate::data::toy::generate_toy_dataset;
use crate::data::{idx, split_holdout, ClientShard, LabeledDataset, TaskSplit};
use crate::error::{Error, Result};
use crate::experiment::config::{sanitize_id, ConfigMap, DatasetKind, ExperimentConfig};
use crate::federation::{run_continual, RoundLog, RoundObserver};
use crate::inversion::InversionReport;
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::params::{Layout, ParameterVector};
use crate::nn::ModelSpec;
use crate::rng::stream;

/// One accuracy checkpoint (after one task) in the run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub checkpoint: usize,
    pub avg_acc: f64,
    pub forgetting: Option<f64>,
    pub relative_forgetting: Option<f64>,
    /// Accuracy of each task measured at this checkpoint.
    pub per_task: Vec<f64>,
    /// Accuracy of each class measured at this checkpoint.
    pub per_class: BTreeMap<usize, f64>,
}

/// Optional per-round evaluation (enabled by `metrics.per_round`); the
/// accuracy is the mean over the classes seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEval {
    pub task: usize,
    pub round: usize,
    pub avg_acc: f64,
}

/// Everything recorded about one run; serialized as `record.json` and
/// updated as the run progresses (`status` moves from `running` to
/// `complete` or `failed`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub status: String,
    pub error: Option<String>,
    pub seed: u64,
    pub strategy: String,
    pub beta: String,
    pub num_tasks: usize,
    pub num_clients: usize,
    pub config: BTreeMap<String, String>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub round_evals: Vec<RoundEval>,
    pub round_logs: Vec<Vec<RoundLog>>,
    pub generation: Vec<InversionReport>,
    pub memory_sizes: Vec<usize>,
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_id: String,
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub record: RunRecord,
}

struct DataBundle {
    train: LabeledDataset,
    /// Separate evaluation dataset; `None` means evaluation indices refer
    /// to `train`.
    test: Option<LabeledDataset>,
    train_pool: Vec<usize>,
    test_indices: Vec<usize>,
}

impl DataBundle {
    fn test_set(&self) -> &LabeledDataset {
        self.test.as_ref().unwrap_or(&self.train)
    }
}

fn build_data(cfg: &ExperimentConfig) -> Result<DataBundle> {
    match cfg.dataset.kind {
        DatasetKind::Toy => {
            let shape = vec![cfg.dataset.channels, cfg.dataset.side, cfg.dataset.side];
            let ds = generate_toy_dataset(
                cfg.dataset.num_classes,
                cfg.dataset.per_class,
                &shape,
                cfg.seed_data,
            )?;
            let holdout =
                split_holdout(&ds, cfg.dataset.holdout, &mut stream(cfg.seed_data, "holdout"))?;
            Ok(DataBundle {
                train: ds,
                test: None,
                train_pool: holdout.train,
                test_indices: holdout.test,
            })
        }
        DatasetKind::Idx => {
            let images = cfg.dataset.images.as_ref().unwrap();
            let labels = cfg.dataset.labels.as_ref().unwrap();
            let train = idx::load_idx(images, labels)?;
            match (&cfg.dataset.test_images, &cfg.dataset.test_labels) {
                (Some(ti), Some(tl)) => {
                    let test = idx::load_idx(ti, tl)?;
                    if test.input_shape != train.input_shape {
                        return Err(Error::Config(format!(
                            "test images have shape {:?}, train images {:?}",
                            test.input_shape, train.input_shape
                        )));
                    }
                    // Harmonize the class count across the two files.
                    let k = train.num_classes.max(test.num_classes);
                    let train = LabeledDataset::new(train.samples, k)?;
                    let test = LabeledDataset::new(test.samples, k)?;
                    let train_pool = (0..train.samples.len()).collect();
                    let test_indices = (0..test.samples.len()).collect();
                    Ok(DataBundle { train, test: Some(test), train_pool, test_indices })
                }
                (None, None) => {
                    let holdout = split_holdout(
                        &train,
                        cfg.dataset.holdout,
                        &mut stream(cfg.seed_data, "holdout"),
                    )?;
                    Ok(DataBundle {
                        train,
                        test: None,
                        train_pool: holdout.train,
                        test_indices: holdout.test,
                    })
                }
                _ => Err(Error::Config(
                    "dataset.test_images and dataset.test_labels must be given together".into(),
                )),
            }
        }
    }
}

fn build_shards(
    cfg: &ExperimentConfig,
    data: &DataBundle,
    split: &TaskSplit,
) -> Result<Vec<Vec<ClientShard>>> {
    let mut rng = stream(cfg.seed_partition, "partition");
    let mut shards = Vec::with_capacity(split.tasks.len());
    for (task_id, classes) in split.tasks.iter().enumerate() {
        let pool: Vec<usize> = data
            .train_pool
            .iter()
            .copied()
            .filter(|&i| classes.contains(&data.train.samples[i].1))
            .collect();
        shards.push(dirichlet_partition(
            &data.train,
            &pool,
            task_id,
            cfg.num_clients,
            cfg.beta,
            &mut rng,
        )?);
    }
    Ok(shards)
}

fn write_record(path: &Path, record: &RunRecord) -> Result<()> {
    let json = serde_json::to_string_pretty(record)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Shortest round-trip decimal text for a float (empty for `None`).
fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_metrics_csv(
    path: &Path,
    cfg: &ExperimentConfig,
    report: &MetricsReport,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    w.write_record([
        "run_id",
        "seed",
        "strategy",
        "beta",
        "num_tasks",
        "checkpoint",
        "avg_acc",
        "forgetting",
        "relative_forgetting",
        "per_task_acc",
    ])
    .map_err(|e| Error::Csv(e.to_string()))?;
    for k in 0..report.average_accuracy.len() {
        let per_task = serde_json::to_string(&report.per_task[k])?;
        w.write_record([
            cfg.run_id.as_str(),
            &cfg.seed.to_string(),
            cfg.continual.strategy.name(),
            &cfg.beta.to_string(),
            &cfg.num_tasks.to_string(),
            &k.to_string(),
            &report.average_accuracy[k].to_string(),
            &fmt_opt(report.forgetting[k]),
            &fmt_opt(report.relative_forgetting[k]),
            &per_task,
        ])
        .map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_rounds_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    w.write_record(["task", "round", "participants", "total_samples", "mean_loss", "avg_acc"])
        .map_err(|e| Error::Csv(e.to_string()))?;
    for (task, logs) in record.round_logs.iter().enumerate() {
        for log in logs {
            let eval = record
                .round_evals
                .iter()
                .find(|e| e.task == task && e.round == log.round)
                .map(|e| e.avg_acc.to_string())
                .unwrap_or_default();
            w.write_record([
                task.to_string(),
                log.round.to_string(),
                log.participants.to_string(),
                log.total_samples.to_string(),
                log.mean_loss.to_string(),
                eval,
            ])
            .map_err(|e| Error::Csv(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Run one experiment and write its outputs under `out_root/<run id>/`.
pub fn run(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunArtifacts> {
    let dir = out_root.join(&cfg.run_id);
    std::fs::create_dir_all(&dir)?;
    let record_path = dir.join("record.json");

    let mut record = RunRecord {
        run_id: cfg.run_id.clone(),
        status: "running".to_string(),
        error: None,
        seed: cfg.seed,
        strategy: cfg.continual.strategy.name().to_string(),
        beta: cfg.beta.to_string(),
        num_tasks: cfg.num_tasks,
        num_clients: cfg.num_clients,
        config: cfg.raw.clone(),
        checkpoints: Vec::new(),
        round_evals: Vec::new(),
        round_logs: Vec::new(),
        generation: Vec::new(),
        memory_sizes: Vec::new(),
    };
    write_record(&record_path, &record)?;

    // The resolved configuration, reloadable as-is.
    let mut rendered = String::new();
    for (k, v) in &cfg.raw {
        rendered.push_str(k);
        rendered.push_str(" = ");
        rendered.push_str(v);
        rendered.push('\n');
    }
    std::fs::write(dir.join("config.txt"), rendered)?;

    match execute(cfg, &mut record) {
        Ok(report) => {
            record.status = "complete".to_string();
            write_record(&record_path, &record)?;
            write_metrics_csv(&dir.join("metrics.csv"), cfg, &report)?;
            write_rounds_csv(&dir.join("rounds.csv"), &record)?;
            Ok(RunArtifacts { run_id: cfg.run_id.clone(), dir, report, record })
        }
        Err(e) => {
            record.status = "failed".to_string();
            record.error = Some(e.to_string());
            write_record(&record_path, &record)?;
            Err(e)
        }
    }
}

/// The computational core of [`run`], filling `record` as it goes.
fn execute(cfg: &ExperimentConfig, record: &mut RunRecord) -> Result<MetricsReport> {
    let data = build_data(cfg)?;
    let shape = &data.train.input_shape;
    if shape.len() != 3 || shape[1] != shape[2] || shape[1] % 4 != 0 {
        return Err(Error::Config(format!(
            "model needs square [channels, side, side] inputs with side divisible by 4, got {shape:?}"
        )));
    }
    let num_classes = data.train.num_classes;
    if num_classes % cfg.num_tasks != 0 {
        return Err(Error::Config(format!(
            "{num_classes} classes cannot be split into {} equal tasks",
            cfg.num_tasks
        )));
    }
    let spec = ModelSpec::conv_classifier(shape[0], shape[1], cfg.model_width, num_classes);
    let layout = Layout::of(&spec)?;

    let split = split_tasks(num_classes, cfg.num_tasks, &mut stream(cfg.seed_partition, "task_order"))?;
    let shards = build_shards(cfg, &data, &split)?;

    let mut round_evals: Vec<RoundEval> = Vec::new();
    let outcome = {
        let test_set = data.test_set();
        let mut obs_storage;
        let observer: Option<RoundObserver> = if cfg.per_round_eval {
            obs_storage = |task: usize, round: usize, params: &ParameterVector| {
                let seen = split.seen_classes(task);
                let per_class =
                    evaluate(&spec, &layout, params, test_set, &data.test_indices, &seen)
                        .unwrap_or_default();
                let avg_acc = if per_class.is_empty() {
                    0.0
                } else {
                    per_class.values().sum::<f64>() / per_class.len() as f64
                };
                round_evals.push(RoundEval { task, round, avg_acc });
            };
            Some(&mut obs_storage as RoundObserver)
        } else {
            None
        };
        run_continual(
            &spec,
            &layout,
            &data.train,
            test_set,
            &data.test_indices,
            &split,
            &shards,
            &cfg.continual,
            cfg.seed,
            observer,
        )?
    };

    let report = MetricsReport::from_log(&outcome.log, cfg.clamp_forgetting);
    record.round_evals = round_evals;
    record.round_logs = outcome.round_logs.clone();
    record.generation = outcome.generation_reports.clone();
    record.memory_sizes = outcome.memory_sizes.clone();
    record.checkpoints = (0..report.average_accuracy.len())
        .map(|k| CheckpointRecord {
            checkpoint: k,
            avg_acc: report.average_accuracy[k],
            forgetting: report.forgetting[k],
            relative_forgetting: report.relative_forgetting[k],
            per_task: report.per_task[k].clone(),
            per_class: outcome.log.checkpoints[k].clone(),
        })
        .collect();
    Ok(report)
}

/// Parse a sweep axis of the form `key=v1,v2,...`.
pub fn parse_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArg(format!("axis '{spec}' must have the form key=v1,v2")))?;
    let values: Vec<String> =
        values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::InvalidArg(format!("axis '{spec}' lists no values")));
    }
    if key.trim() == "seed" {
        return Err(Error::InvalidArg(
            "sweep over seeds with --seeds, not as the axis".into(),
        ));
    }
    Ok((key.trim().to_string(), values))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn opt_mean_std(values: &[Option<f64>]) -> (String, String) {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() != values.len() || present.is_empty() {
        return (String::new(), String::new());
    }
    let (m, s) = mean_std(&present);
    (m.to_string(), s.to_string())
}

/// Run every axis value for every seed and summarize the final checkpoint
/// of each group as mean and standard deviation. Returns the summary path.
pub fn sweep(
    base: &ConfigMap,
    axis_key: &str,
    axis_values: &[String],
    seeds: &[u64],
    out_root: &Path,
) -> Result<PathBuf> {
    if seeds.is_empty() {
        return Err(Error::InvalidArg("sweep needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_root)?;
    let summary_path = out_root.join(format!("sweep-{}.csv", sanitize_id(axis_key)));
    let mut w = csv::Writer::from_path(&summary_path).map_err(|e| Error::Csv(e.to_string()))?;
    w.write_record([
        "axis",
        "value",
        "runs",
        "avg_acc_mean",
        "avg_acc_std",
        "forgetting_mean",
        "forgetting_std",
        "relative_forgetting_mean",
        "relative_forgetting_std",
    ])
    .map_err(|e| Error::Csv(e.to_string()))?;

    for value in axis_values {
        let mut accs = Vec::new();
        let mut fs = Vec::new();
        let mut rs = Vec::new();
        for &seed in seeds {
            let mut cfg_map = base.clone();
            cfg_map.set(axis_key, value)?;
            cfg_map.set("seed", &seed.to_string())?;
            cfg_map.set(
                "run.id",
                &format!("{}-{}-s{seed}", sanitize_id(axis_key), sanitize_id(value)),
            )?;
            let cfg = ExperimentConfig::from_map(&cfg_map)?;
            log::info!("sweep: running {}", cfg.run_id);
            let artifacts = run(&cfg, out_root)?;
            let last = artifacts.report.average_accuracy.len() - 1;
            accs.push(artifacts.report.average_accuracy[last]);
            fs.push(artifacts.report.forgetting[last]);
            rs.push(artifacts.report.relative_forgetting[last]);
        }
        let (acc_mean, acc_std) = mean_std(&accs);
        let (f_mean, f_std) = opt_mean_std(&fs);
        let (r_mean, r_std) = opt_mean_std(&rs);
        w.write_record([
            axis_key.to_string(),
            value.clone(),
            seeds.len().to_string(),
            acc_mean.to_string(),
            acc_std.to_string(),
            f_mean,
            f_std,
            r_mean,
            r_std,
        ])
        .map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(summary_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config(overrides: &[(&str, &str)]) -> ExperimentConfig {
        let mut map = ConfigMap::default();
        // Small everything: keep the inline test fast.
        let small = [
            ("dataset.num_classes", "4"),
            ("dataset.per_class", "12"),
            ("dataset.side", "8"),
            ("split.num_tasks", "2"),
            ("partition.num_clients", "2"),
            ("fed.rounds", "1"),
            ("fed.epochs", "1"),
            ("fed.batch", "8"),
            ("model.width", "2"),
            ("target.noise_dim", "8"),
            ("target.gen_width", "4"),
            ("target.batch", "4"),
            ("target.gen_steps", "1"),
            ("target.capacity_per_class", "2"),
            ("seed", "11"),
        ];
        for (k, v) in small.iter().chain(overrides) {
            map.set(k, v).unwrap();
        }
        ExperimentConfig::from_map(&map).unwrap()
    }

    #[test]
    fn run_writes_all_artifacts_and_completes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(&[("metrics.per_round", "true")]);
        let artifacts = run(&cfg, dir.path()).unwrap();
        assert_eq!(artifacts.record.status, "complete");
        assert_eq!(artifacts.record.checkpoints.len(), 2);
        assert_eq!(artifacts.record.round_evals.len(), 2); // 1 round x 2 tasks
        let run_dir = dir.path().join(&artifacts.run_id);
        for file in ["record.json", "config.txt", "metrics.csv", "rounds.csv"] {
            assert!(run_dir.join(file).exists(), "{file} missing");
        }
        // The record round-trips through JSON.
        let text = std::fs::read_to_string(run_dir.join("record.json")).unwrap();
        let back: RunRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, artifacts.record);
    }

    #[test]
    fn identical_configs_produce_byte_identical_outputs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = quick_config(&[]);
        let a = run(&cfg, dir_a.path()).unwrap();
        let b = run(&cfg, dir_b.path()).unwrap();
        for file in ["metrics.csv", "rounds.csv", "record.json"] {
            let x = std::fs::read(dir_a.path().join(&a.run_id).join(file)).unwrap();
            let y = std::fs::read(dir_b.path().join(&b.run_id).join(file)).unwrap();
            assert_eq!(x, y, "{file} differs between identical runs");
        }
    }

    #[test]
    fn failed_runs_record_their_error() {
        let dir = tempfile::tempdir().unwrap();
        // 4 classes cannot be split into 3 equal tasks.
        let mut map = ConfigMap::default();
        for (k, v) in [
            ("dataset.num_classes", "4"),
            ("dataset.per_class", "6"),
            ("dataset.side", "8"),
            ("split.num_tasks", "3"),
            ("fed.rounds", "1"),
            ("model.width", "2"),
        ] {
            map.set(k, v).unwrap();
        }
        let cfg = ExperimentConfig::from_map(&map).unwrap();
        assert!(run(&cfg, dir.path()).is_err());
        let text =
            std::fs::read_to_string(dir.path().join(&cfg.run_id).join("record.json")).unwrap();
        let record: RunRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(record.status, "failed");
        assert!(record.error.is_some());
    }

    #[test]
    fn axis_parsing_accepts_lists_and_rejects_seed() {
        let (key, values) = parse_axis("partition.beta=iid,1.0,0.1").unwrap();
        assert_eq!(key, "partition.beta");
        assert_eq!(values, vec!["iid", "1.0", "0.1"]);
        assert!(parse_axis("no-equals").is_err());
        assert!(parse_axis("seed=1,2").is_err());
        assert!(parse_axis("strategy=").is_err());
    }

    #[test]
    fn sweep_summarizes_each_axis_value() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = ConfigMap::default();
        for (k, v) in [
            ("dataset.num_classes", "4"),
            ("dataset.per_class", "10"),
            ("dataset.side", "8"),
            ("split.num_tasks", "2"),
            ("partition.num_clients", "2"),
            ("fed.rounds", "1"),
            ("fed.epochs", "1"),
            ("model.width", "2"),
        ] {
            base.set(k, v).unwrap();
        }
        let path = sweep(
            &base,
            "strategy",
            &["finetune".to_string(), "fedlwf".to_string()],
            &[5, 6],
            dir.path(),
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3); // header + 2 axis values
        assert!(lines[1].starts_with("strategy,finetune,2,"));
        assert!(lines[2].starts_with("strategy,fedlwf,2,"));
        // Four run directories were produced.
        for id in [
            "strategy-finetune-s5",
            "strategy-finetune-s6",
            "strategy-fedlwf-s5",
            "strategy-fedlwf-s6",
        ] {
            assert!(dir.path().join(id).join("metrics.csv").exists());
        }
    }

    #[test]
    fn mean_std_handles_degenerate_inputs() {
        let (m, s) = mean_std(&[2.0]);
        assert_eq!((m, s), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - 2.0_f64.sqrt()).abs() < 1e-12);
        let (fm, fs) = opt_mean_std(&[Some(1.0), None]);
        assert_eq!((fm.as_str(), fs.as_str()), ("", ""));
    }
}
