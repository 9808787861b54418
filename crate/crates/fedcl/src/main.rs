//! Command-line front end: single runs, sweeps, and plot-data extraction.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use fedcl::error::Result;
use fedcl::experiment::config::{ConfigMap, ExperimentConfig};
use fedcl::experiment::plotdata::{load_record, plot_csv, PlotKind};
use fedcl::experiment::runner;

#[derive(Parser)]
#[command(
    name = "fedcl",
    version,
    about = "Federated class-continual learning simulator",
    long_about = "Simulates clients that learn a growing set of classes task by task under \
                  federated averaging, with strategies that counteract catastrophic \
                  forgetting — including server-side generative replay distilled from the \
                  frozen global model."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment.
    Run {
        /// Configuration file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, e.g. --set strategy=target (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
        /// Output root (default: $FEDCL_OUTPUT_ROOT or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one configuration axis across seeds and summarize.
    Sweep {
        /// The swept key and its values, e.g. --axis strategy=finetune,target
        #[arg(long, value_name = "KEY=V1,V2,...")]
        axis: String,
        /// Comma-separated seeds (default: the configured seed).
        #[arg(long, value_name = "S1,S2,...")]
        seeds: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract plot-ready CSV from a finished run.
    Plotdata {
        /// Run directory (or path to its record.json).
        #[arg(long)]
        run: PathBuf,
        /// forgetting_curve | task_matrix | distill_trace | memory_size
        #[arg(long)]
        kind: String,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_root(cli_out: Option<PathBuf>) -> PathBuf {
    cli_out
        .or_else(|| std::env::var_os("FEDCL_OUTPUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn build_map(config: Option<&PathBuf>, set: &[String]) -> Result<ConfigMap> {
    let mut map = ConfigMap::default();
    if let Some(path) = config {
        map.load_file(path)?;
    }
    for kv in set {
        map.apply_override(kv)?;
    }
    Ok(map)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".to_string())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, set, print_config, out } => {
            let map = build_map(config.as_ref(), &set)?;
            if print_config {
                print!("{}", map.render());
                return Ok(());
            }
            let cfg = ExperimentConfig::from_map(&map)?;
            let root = out_root(out);
            let artifacts = runner::run(&cfg, &root)?;
            let last = artifacts.report.average_accuracy.len() - 1;
            println!(
                "{}: avg_acc={:.4} forgetting={} relative={} -> {}",
                artifacts.run_id,
                artifacts.report.average_accuracy[last],
                fmt_opt(artifacts.report.forgetting[last]),
                fmt_opt(artifacts.report.relative_forgetting[last]),
                artifacts.dir.display()
            );
            Ok(())
        }
        Command::Sweep { axis, seeds, config, set, out } => {
            let map = build_map(config.as_ref(), &set)?;
            let (axis_key, axis_values) = runner::parse_axis(&axis)?;
            let seeds: Vec<u64> = match seeds {
                None => vec![map.get("seed").parse().map_err(|_| {
                    fedcl::Error::Config("seed: expected an integer".to_string())
                })?],
                Some(list) => list
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim().parse().map_err(|_| {
                            fedcl::Error::InvalidArg(format!("bad seed '{}'", s.trim()))
                        })
                    })
                    .collect::<Result<Vec<u64>>>()?,
            };
            let root = out_root(out);
            let summary = runner::sweep(&map, &axis_key, &axis_values, &seeds, &root)?;
            println!("wrote {}", summary.display());
            Ok(())
        }
        Command::Plotdata { run, kind, out } => {
            let record = load_record(&run)?;
            let csv = plot_csv(&record, PlotKind::parse(&kind)?);
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = real_main() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
