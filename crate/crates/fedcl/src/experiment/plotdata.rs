//! Turn a finished run's `record.json` into plot-ready CSV tables.

use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::runner::RunRecord;

/// The available extractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Average accuracy, forgetting, and relative forgetting over
    /// checkpoints.
    ForgettingCurve,
    /// The task-by-checkpoint accuracy matrix.
    TaskMatrix,
    /// Generator/student losses and agreement over generation rounds.
    DistillTrace,
    /// Synthetic memory size after each generation.
    MemorySize,
}

impl PlotKind {
    pub fn parse(name: &str) -> Result<PlotKind> {
        match name {
            "forgetting_curve" => Ok(PlotKind::ForgettingCurve),
            "task_matrix" => Ok(PlotKind::TaskMatrix),
            "distill_trace" => Ok(PlotKind::DistillTrace),
            "memory_size" => Ok(PlotKind::MemorySize),
            other => Err(Error::InvalidArg(format!(
                "unknown plot kind '{other}' (expected forgetting_curve, task_matrix, \
                 distill_trace, or memory_size)"
            ))),
        }
    }
}

/// Load the record of a run directory (or a direct path to a record file).
pub fn load_record(run_dir: &Path) -> Result<RunRecord> {
    let path = if run_dir.is_dir() { run_dir.join("record.json") } else { run_dir.to_path_buf() };
    let text = std::fs::read_to_string(&path)?;
    let record: RunRecord = serde_json::from_str(&text)?;
    Ok(record)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Extract one CSV table from a run record.
pub fn plot_csv(record: &RunRecord, kind: PlotKind) -> String {
    let mut out = String::new();
    match kind {
        PlotKind::ForgettingCurve => {
            out.push_str("checkpoint,avg_acc,forgetting,relative_forgetting\n");
            for c in &record.checkpoints {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    c.checkpoint,
                    c.avg_acc,
                    opt(c.forgetting),
                    opt(c.relative_forgetting)
                ));
            }
        }
        PlotKind::TaskMatrix => {
            out.push_str("checkpoint,task,acc\n");
            for c in &record.checkpoints {
                for (task, acc) in c.per_task.iter().enumerate() {
                    out.push_str(&format!("{},{task},{acc}\n", c.checkpoint));
                }
            }
        }
        PlotKind::DistillTrace => {
            out.push_str("generation,round,ce,div,bn,total,agreement\n");
            for (g, report) in record.generation.iter().enumerate() {
                for (round, r) in report.rounds.iter().enumerate() {
                    out.push_str(&format!(
                        "{g},{round},{},{},{},{},{}\n",
                        r.losses.ce, r.losses.div, r.losses.bn, r.losses.total, r.agreement
                    ));
                }
            }
        }
        PlotKind::MemorySize => {
            out.push_str("generation,samples\n");
            for (g, n) in record.memory_sizes.iter().enumerate() {
                out.push_str(&format!("{g},{n}\n"));
            }
        }
    }
    out
}
