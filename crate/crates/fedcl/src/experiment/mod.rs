//! Experiment harness: flat-file configuration, single runs with CSV/JSON
//! outputs, one-axis sweeps, and plot-data extraction.

pub mod config;
pub mod plotdata;
pub mod runner;
