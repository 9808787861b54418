//! Flat `key = value` configuration with dotted namespaces.
//!
//! Every key has a default; files and `--set` overrides may only touch
//! known keys, so typos fail loudly instead of silently running the
//! default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::partition::Beta;
use crate::error::{Error, Result};
use crate::federation::{ContinualConfig, FedConfig, TeacherRefresh};
use crate::inversion::GenerationConfig;
use crate::strategies::Strategy;

/// Every configuration key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("dataset.kind", "toy"),
    ("dataset.num_classes", "8"),
    ("dataset.per_class", "250"),
    ("dataset.holdout", "0.2"),
    ("dataset.channels", "1"),
    ("dataset.side", "16"),
    ("dataset.images", ""),
    ("dataset.labels", ""),
    ("dataset.test_images", ""),
    ("dataset.test_labels", ""),
    ("split.num_tasks", "2"),
    ("partition.num_clients", "5"),
    ("partition.beta", "iid"),
    ("strategy", "finetune"),
    ("fed.rounds", "20"),
    ("fed.fraction", "1.0"),
    ("fed.epochs", "2"),
    ("fed.batch", "32"),
    ("fed.lr", "0.01"),
    ("fed.momentum", "0.9"),
    ("fed.weight_decay", "5e-4"),
    ("fed.alpha", "1"),
    ("fed.warm_start", "true"),
    ("fed.teacher", "frozen"),
    ("fed.parallel", "true"),
    ("ewc.lambda", "100"),
    ("ewc.batches", "8"),
    ("replay.budget", "10"),
    ("target.noise_dim", "64"),
    ("target.gen_width", "16"),
    ("target.batch", "64"),
    ("target.gen_steps", "30"),
    ("target.student_steps", "60"),
    ("target.lr_g", "0.05"),
    ("target.lr_s", "0.01"),
    ("target.lambda_div", "1"),
    ("target.lambda_bn", "10"),
    ("target.capacity_per_class", "80"),
    ("target.rounds", "auto"),
    ("metrics.clamp", "true"),
    ("metrics.per_round", "false"),
    ("model.width", "8"),
    ("seed", "2021"),
    ("seed.data", ""),
    ("seed.partition", ""),
    ("seed.init", ""),
    ("run.id", ""),
];

/// The raw string-valued configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigMap {
    map: BTreeMap<String, String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        ConfigMap {
            map: DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ConfigMap {
    /// Set a known key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.map.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.map
            .get(key)
            .unwrap_or_else(|| panic!("key '{key}' missing from defaults"))
    }

    /// Apply a `key=value` override (as given to `--set`).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{spec}' must have the form key=value"))
        })?;
        self.set(key.trim(), value.trim())
    }

    /// Merge a configuration file: one `key = value` per line, `#` starts
    /// a comment, blank lines are ignored.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    i + 1
                ))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
        }
        Ok(())
    }

    /// All keys and values, one `key = value` line each, sorted by key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.map
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

fn parse_opt_u64(key: &str, v: &str) -> Result<Option<u64>> {
    if v.is_empty() {
        Ok(None)
    } else {
        parse_u64(key, v).map(Some)
    }
}

/// Which dataset source to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Procedurally generated oriented-patch images.
    Toy,
    /// Binary image/label files in the classic big-endian layout.
    Idx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub num_classes: usize,
    pub per_class: usize,
    pub holdout: f64,
    pub channels: usize,
    pub side: usize,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

/// Fully parsed and validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// The resolved raw map, recorded alongside results.
    pub raw: BTreeMap<String, String>,
    pub dataset: DatasetConfig,
    pub num_tasks: usize,
    pub num_clients: usize,
    pub beta: Beta,
    pub continual: ContinualConfig,
    pub clamp_forgetting: bool,
    pub per_round_eval: bool,
    pub model_width: usize,
    pub seed: u64,
    pub seed_data: u64,
    pub seed_partition: u64,
    pub run_id: String,
}

/// Replace anything outside `[A-Za-z0-9._-]` so ids are safe as directory
/// names.
pub fn sanitize_id(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_ascii_alphanumeric() || ".-_".contains(c) { c } else { '-' })
        .collect()
}

impl ExperimentConfig {
    pub fn from_map(cfg: &ConfigMap) -> Result<ExperimentConfig> {
        let kind = match cfg.get("dataset.kind") {
            "toy" => DatasetKind::Toy,
            "idx" => DatasetKind::Idx,
            other => {
                return Err(Error::Config(format!(
                    "dataset.kind: expected toy or idx, got '{other}'"
                )))
            }
        };
        let dataset = DatasetConfig {
            kind,
            num_classes: parse_usize("dataset.num_classes", cfg.get("dataset.num_classes"))?,
            per_class: parse_usize("dataset.per_class", cfg.get("dataset.per_class"))?,
            holdout: parse_f64("dataset.holdout", cfg.get("dataset.holdout"))?,
            channels: parse_usize("dataset.channels", cfg.get("dataset.channels"))?,
            side: parse_usize("dataset.side", cfg.get("dataset.side"))?,
            images: parse_path(cfg.get("dataset.images")),
            labels: parse_path(cfg.get("dataset.labels")),
            test_images: parse_path(cfg.get("dataset.test_images")),
            test_labels: parse_path(cfg.get("dataset.test_labels")),
        };
        if !(0.0..1.0).contains(&dataset.holdout) {
            return Err(Error::Config(format!(
                "dataset.holdout: must lie in [0, 1), got {}",
                dataset.holdout
            )));
        }
        if kind == DatasetKind::Toy {
            if dataset.num_classes == 0 || dataset.per_class == 0 {
                return Err(Error::Config(
                    "dataset.num_classes and dataset.per_class must be positive".into(),
                ));
            }
            if dataset.side % 4 != 0 || dataset.side < 8 {
                return Err(Error::Config(format!(
                    "dataset.side: must be at least 8 and divisible by 4, got {}",
                    dataset.side
                )));
            }
        }
        if kind == DatasetKind::Idx && (dataset.images.is_none() || dataset.labels.is_none()) {
            return Err(Error::Config(
                "dataset.images and dataset.labels are required when dataset.kind = idx".into(),
            ));
        }

        let num_tasks = parse_usize("split.num_tasks", cfg.get("split.num_tasks"))?;
        let num_clients = parse_usize("partition.num_clients", cfg.get("partition.num_clients"))?;
        if num_tasks == 0 || num_clients == 0 {
            return Err(Error::Config(
                "split.num_tasks and partition.num_clients must be positive".into(),
            ));
        }
        let beta = Beta::parse(cfg.get("partition.beta"))?;
        let strategy = Strategy::parse(cfg.get("strategy"))?;

        let fraction = parse_f64("fed.fraction", cfg.get("fed.fraction"))?;
        if !(0.0 < fraction && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fed.fraction: must lie in (0, 1], got {fraction}"
            )));
        }
        let batch_size = parse_usize("fed.batch", cfg.get("fed.batch"))?;
        if batch_size == 0 {
            return Err(Error::Config("fed.batch: must be positive".into()));
        }
        let fed = FedConfig {
            rounds: parse_usize("fed.rounds", cfg.get("fed.rounds"))?,
            fraction,
            epochs: parse_usize("fed.epochs", cfg.get("fed.epochs"))?,
            batch_size,
            lr: parse_f64("fed.lr", cfg.get("fed.lr"))?,
            momentum: parse_f64("fed.momentum", cfg.get("fed.momentum"))?,
            weight_decay: parse_f64("fed.weight_decay", cfg.get("fed.weight_decay"))?,
            alpha: parse_f64("fed.alpha", cfg.get("fed.alpha"))?,
            warm_start: parse_bool("fed.warm_start", cfg.get("fed.warm_start"))?,
            teacher_refresh: TeacherRefresh::parse(cfg.get("fed.teacher"))?,
            parallel: parse_bool("fed.parallel", cfg.get("fed.parallel"))?,
        };

        let gen_batch = parse_usize("target.batch", cfg.get("target.batch"))?;
        if gen_batch == 0 {
            return Err(Error::Config("target.batch: must be positive".into()));
        }
        let gen_rounds = match cfg.get("target.rounds") {
            "auto" => None,
            v => Some(parse_usize("target.rounds", v)?),
        };
        let generation = GenerationConfig {
            noise_dim: parse_usize("target.noise_dim", cfg.get("target.noise_dim"))?,
            gen_width: parse_usize("target.gen_width", cfg.get("target.gen_width"))?,
            batch: gen_batch,
            gen_steps: parse_usize("target.gen_steps", cfg.get("target.gen_steps"))?,
            student_steps: parse_usize("target.student_steps", cfg.get("target.student_steps"))?,
            lr_g: parse_f64("target.lr_g", cfg.get("target.lr_g"))?,
            lr_s: parse_f64("target.lr_s", cfg.get("target.lr_s"))?,
            lambda_div: parse_f64("target.lambda_div", cfg.get("target.lambda_div"))?,
            lambda_bn: parse_f64("target.lambda_bn", cfg.get("target.lambda_bn"))?,
            capacity: 0, // derived per task from capacity_per_class
            rounds: gen_rounds,
        };

        let seed = parse_u64("seed", cfg.get("seed"))?;
        let continual = ContinualConfig {
            strategy,
            fed,
            ewc_lambda: parse_f64("ewc.lambda", cfg.get("ewc.lambda"))?,
            ewc_batches: parse_usize("ewc.batches", cfg.get("ewc.batches"))?,
            replay_budget: parse_usize("replay.budget", cfg.get("replay.budget"))?,
            generation,
            capacity_per_class: parse_usize(
                "target.capacity_per_class",
                cfg.get("target.capacity_per_class"),
            )?,
            init_seed: parse_opt_u64("seed.init", cfg.get("seed.init"))?,
        };

        let run_id = {
            let given = cfg.get("run.id");
            if given.is_empty() {
                format!("{}-{}-t{}-s{}", strategy.name(), beta, num_tasks, seed)
            } else {
                given.to_string()
            }
        };

        Ok(ExperimentConfig {
            raw: cfg.as_map().clone(),
            dataset,
            num_tasks,
            num_clients,
            beta,
            continual,
            clamp_forgetting: parse_bool("metrics.clamp", cfg.get("metrics.clamp"))?,
            per_round_eval: parse_bool("metrics.per_round", cfg.get("metrics.per_round"))?,
            model_width: parse_usize("model.width", cfg.get("model.width"))?,
            seed,
            seed_data: parse_opt_u64("seed.data", cfg.get("seed.data"))?.unwrap_or(seed),
            seed_partition: parse_opt_u64("seed.partition", cfg.get("seed.partition"))?
                .unwrap_or(seed),
            run_id: sanitize_id(&run_id),
        })
    }
}
