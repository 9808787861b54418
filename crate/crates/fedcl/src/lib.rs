//! A desk-scale simulator for federated class-continual learning.
//!
//! Clients see a stream of tasks, each introducing new classes, and train a
//! shared model by federated averaging without ever sharing raw data. The
//! crate implements a server-side generative replay strategy — after each
//! task the server inverts the frozen global model into a small synthetic
//! memory, which later tasks use as distillation anchors — alongside
//! baselines (plain finetuning, distillation on local data, quadratic
//! importance penalties, and exemplar replay), forgetting metrics, and a
//! reproducible experiment harness.
//!
//! Everything is deterministic given a seed: all randomness flows through
//! named streams ([`rng::stream`]), so runs replay bit for bit regardless
//! of thread scheduling.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
