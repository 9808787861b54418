//! Federated training loop: client sampling, local updates, weighted
//! aggregation, and the task-by-task continual schedule.
//!
//! Every client update derives its randomness from streams named by
//! `(seed, client, task, round)`, and clients share no mutable state, so
//! running them in parallel or sequentially produces bit-identical
//! results.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, LabeledDataset, TaskSplit};
use crate::error::{Error, Result};
use crate::inversion::{
    data_generation, GenerationConfig, InversionReport, SyntheticMemory,
};
use crate::metrics::{evaluate, AccuracyLog};
use crate::nn::forward::{apply_bn_updates, BN_MOMENTUM};
use crate::nn::params::{Layout, ParameterVector};
use crate::nn::sgd::{sgd_step, SgdHyper, SgdState};
use crate::nn::ModelSpec;
use crate::rng::{sample_without_replacement, stream, Stream};
use crate::strategies::{
    ce_step, ewc_fisher, ewc_step, exemplar_update, lwf_step, replay_step, target_step,
    ExemplarScope, ExemplarStore, FisherDiagonal, StepResult, Strategy,
};

/// When the previous-task model is refreshed during a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherRefresh {
    /// Freeze the end-of-previous-task model for the whole task (default).
    Frozen,
    /// Use the current global model at the start of every round.
    PerRound,
}

impl TeacherRefresh {
    pub fn parse(text: &str) -> Result<TeacherRefresh> {
        match text {
            "frozen" => Ok(TeacherRefresh::Frozen),
            "per_round" => Ok(TeacherRefresh::PerRound),
            other => Err(Error::Config(format!(
                "unknown teacher refresh mode '{other}' (expected frozen or per_round)"
            ))),
        }
    }
}

impl std::fmt::Display for TeacherRefresh {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TeacherRefresh::Frozen => "frozen",
            TeacherRefresh::PerRound => "per_round",
        })
    }
}

/// Hyperparameters of the federated loop itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    /// Fraction of clients sampled per round; at least one participates.
    pub fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the distillation term in forgetting-aware strategies.
    pub alpha: f64,
    /// Keep the previous task's parameters when a new task starts.
    pub warm_start: bool,
    pub teacher_refresh: TeacherRefresh,
    pub parallel: bool,
}

/// Auxiliary material a client needs beyond its shard, resolved per round.
#[derive(Clone, Copy)]
pub enum ClientAux<'a> {
    /// Plain local cross-entropy (also every strategy's first task).
    Plain,
    /// Distill from the previous model on the client's own images.
    Distill { teacher: &'a ParameterVector, alpha: f64 },
    /// Distill from the previous model on server-generated images.
    Synthetic {
        teacher: &'a ParameterVector,
        memory: &'a SyntheticMemory,
        alpha: f64,
    },
    /// Quadratic pull toward the anchor weighted by importance.
    Quadratic { fisher: &'a FisherDiagonal, lambda: f64 },
    /// Mix stored exemplars into every batch.
    Exemplars { store: &'a ExemplarStore },
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientResult {
    pub client_id: usize,
    pub params: ParameterVector,
    pub num_samples: usize,
    pub mean_loss: f64,
}

/// Immutable inputs shared by all client updates of one round.
pub struct ClientEnv<'a> {
    pub spec: &'a ModelSpec,
    pub layout: &'a Layout,
    pub dataset: &'a LabeledDataset,
    pub cfg: &'a FedConfig,
    pub seed: u64,
    pub task_id: usize,
    pub round: usize,
}

/// Sample `max(ceil(fraction * n), 1)` distinct clients, returned in
/// ascending order. Always consumes the stream the same way for a given
/// `(n, fraction)`, so selections can be replayed.
pub fn sample_clients(num_clients: usize, fraction: f64, rng: &mut Stream) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::InvalidArg("cannot sample from zero clients".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArg(format!(
            "client fraction {fraction} must lie in [0, 1]"
        )));
    }
    let m = ((fraction * num_clients as f64).ceil() as usize).clamp(1, num_clients);
    let mut picks = sample_without_replacement(rng, num_clients, m);
    picks.sort_unstable();
    Ok(picks)
}

/// Run one client's local training and return its updated parameters.
///
/// An empty shard returns the globals untouched with weight zero. Local
/// epochs shuffle through a `client.<id>.task<t>.round<r>` stream; any
/// synthetic or exemplar draws use a separate `.aux` stream that is only
/// created when those draws actually happen, so configurations that reduce
/// to plain training match it bit for bit.
pub fn client_update(
    env: &ClientEnv,
    globals: &ParameterVector,
    shard: &ClientShard,
    aux: &ClientAux,
) -> Result<ClientResult> {
    let mut params = globals.clone();
    if shard.indices.is_empty() {
        log::debug!(
            "client {} holds no samples for task {}; returning globals",
            shard.client_id,
            env.task_id
        );
        return Ok(ClientResult {
            client_id: shard.client_id,
            params,
            num_samples: 0,
            mean_loss: 0.0,
        });
    }
    let base = format!(
        "client.{}.task{}.round{}",
        shard.client_id, env.task_id, env.round
    );
    let mut shuffle_rng = stream(env.seed, &base);
    let mut aux_stream = match aux {
        ClientAux::Synthetic { .. } | ClientAux::Exemplars { .. } => {
            Some(stream(env.seed, &format!("{base}.aux")))
        }
        _ => None,
    };

    let hyper = SgdHyper {
        lr: env.cfg.lr,
        momentum: env.cfg.momentum,
        weight_decay: env.cfg.weight_decay,
    };
    let mut opt = SgdState::new(env.layout);
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..env.cfg.epochs {
        for batch in
            crate::data::epoch_batches(&shard.indices, env.cfg.batch_size, &mut shuffle_rng)
        {
            let (x, y) = env.dataset.batch(&batch);
            let result: StepResult = match aux {
                ClientAux::Plain => ce_step(env.spec, env.layout, &params, &x, &y)?,
                ClientAux::Distill { teacher, alpha } => {
                    lwf_step(env.spec, env.layout, &params, teacher, &x, &y, *alpha)?
                }
                ClientAux::Synthetic { teacher, memory, alpha } => {
                    let rng = aux_stream.as_mut().unwrap();
                    let synth = memory.draw_batch(env.cfg.batch_size, rng);
                    target_step(env.spec, env.layout, &params, teacher, &x, &y, &synth, *alpha)?
                }
                ClientAux::Quadratic { fisher, lambda } => {
                    ewc_step(env.spec, env.layout, &params, fisher, &x, &y, *lambda)?
                }
                ClientAux::Exemplars { store } => {
                    let rng = aux_stream.as_mut().unwrap();
                    let all = store.all_indices();
                    let picks: Vec<usize> = if all.len() > env.cfg.batch_size {
                        sample_without_replacement(rng, all.len(), env.cfg.batch_size)
                            .into_iter()
                            .map(|i| all[i])
                            .collect()
                    } else {
                        all
                    };
                    let (ex, ey) = env.dataset.batch(&picks);
                    replay_step(env.spec, env.layout, &params, &x, &y, &ex, &ey)?
                }
            };
            for trace in &result.traces {
                apply_bn_updates(&mut params, env.layout, trace, BN_MOMENTUM);
            }
            sgd_step(&mut params, &result.grad, &hyper, &mut opt)?;
            loss_sum += result.loss;
            steps += 1;
        }
    }
    let mean_loss = if steps == 0 { 0.0 } else { loss_sum / steps as f64 };
    Ok(ClientResult {
        client_id: shard.client_id,
        params,
        num_samples: shard.indices.len(),
        mean_loss,
    })
}

/// Sample-count-weighted average of client parameters (running statistics
/// included). Errors when every weight is zero.
pub fn aggregate(layout: &Layout, results: &[ClientResult]) -> Result<ParameterVector> {
    let _ = layout;
    let vectors: Vec<&ParameterVector> = results.iter().map(|r| &r.params).collect();
    let weights: Vec<f64> = results.iter().map(|r| r.num_samples as f64).collect();
    ParameterVector::weighted_mean(&vectors, &weights)
}

/// Diagnostics of one federated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub participants: usize,
    pub total_samples: usize,
    pub mean_loss: f64,
}

/// Strategy-specific material available during a task, shared by all of
/// its rounds.
pub enum TaskAux<'a> {
    Plain,
    Distill { teacher: &'a ParameterVector, alpha: f64 },
    Synthetic {
        teacher: &'a ParameterVector,
        memory: &'a SyntheticMemory,
        alpha: f64,
    },
    Quadratic { fisher: &'a FisherDiagonal, lambda: f64 },
    /// One exemplar store per client.
    ExemplarsLocal { stores: &'a [ExemplarStore] },
    /// A single store shared by every client.
    ExemplarsGlobal { store: &'a ExemplarStore },
}

impl TaskAux<'_> {
    /// Resolve the per-client view, falling back to plain training when a
    /// client's exemplar store is still empty.
    fn for_client<'b>(&'b self, client_id: usize, teacher_override: Option<&'b ParameterVector>) -> ClientAux<'b> {
        match self {
            TaskAux::Plain => ClientAux::Plain,
            TaskAux::Distill { teacher, alpha } => ClientAux::Distill {
                teacher: teacher_override.unwrap_or(teacher),
                alpha: *alpha,
            },
            TaskAux::Synthetic { teacher, memory, alpha } => ClientAux::Synthetic {
                teacher: teacher_override.unwrap_or(teacher),
                memory,
                alpha: *alpha,
            },
            TaskAux::Quadratic { fisher, lambda } => {
                ClientAux::Quadratic { fisher, lambda: *lambda }
            }
            TaskAux::ExemplarsLocal { stores } => {
                let store = &stores[client_id];
                if store.is_empty() {
                    log::warn!("client {client_id} has no exemplars yet; training plainly");
                    ClientAux::Plain
                } else {
                    ClientAux::Exemplars { store }
                }
            }
            TaskAux::ExemplarsGlobal { store } => {
                if store.is_empty() {
                    log::warn!("exemplar store is empty; training plainly");
                    ClientAux::Plain
                } else {
                    ClientAux::Exemplars { store }
                }
            }
        }
    }
}

/// Run all federated rounds of one task, mutating `globals` in place.
///
/// `select_rng` drives client sampling and must be threaded across tasks
/// by the caller. `on_round` observes the aggregated model after every
/// round.
#[allow(clippy::too_many_arguments)]
pub fn run_task(
    spec: &ModelSpec,
    layout: &Layout,
    dataset: &LabeledDataset,
    shards: &[ClientShard],
    globals: &mut ParameterVector,
    aux: &TaskAux,
    cfg: &FedConfig,
    seed: u64,
    task_id: usize,
    select_rng: &mut Stream,
    mut on_round: Option<&mut dyn FnMut(usize, &ParameterVector)>,
) -> Result<Vec<RoundLog>> {
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let selected = sample_clients(shards.len(), cfg.fraction, select_rng)?;
        let teacher_round = match cfg.teacher_refresh {
            TeacherRefresh::Frozen => None,
            TeacherRefresh::PerRound => match aux {
                TaskAux::Distill { .. } | TaskAux::Synthetic { .. } => Some(globals.clone()),
                _ => None,
            },
        };
        let results: Vec<ClientResult> = {
            let env = ClientEnv { spec, layout, dataset, cfg, seed, task_id, round };
            let globals_ref = &*globals;
            let run_one = |&cid: &usize| -> Result<ClientResult> {
                let client_aux = aux.for_client(cid, teacher_round.as_ref());
                client_update(&env, globals_ref, &shards[cid], &client_aux)
            };
            if cfg.parallel {
                selected.par_iter().map(run_one).collect::<Result<Vec<_>>>()?
            } else {
                selected.iter().map(run_one).collect::<Result<Vec<_>>>()?
            }
        };
        let total_samples: usize = results.iter().map(|r| r.num_samples).sum();
        if total_samples == 0 {
            log::warn!(
                "round {round} of task {task_id}: no selected client holds data; model unchanged"
            );
            logs.push(RoundLog { round, participants: selected.len(), total_samples: 0, mean_loss: 0.0 });
            if let Some(hook) = on_round.as_deref_mut() {
                hook(round, globals);
            }
            continue;
        }
        *globals = aggregate(layout, &results)?;
        let mean_loss = results
            .iter()
            .map(|r| r.mean_loss * r.num_samples as f64)
            .sum::<f64>()
            / total_samples as f64;
        logs.push(RoundLog {
            round,
            participants: selected.len(),
            total_samples,
            mean_loss,
        });
        if let Some(hook) = on_round.as_deref_mut() {
            hook(round, globals);
        }
    }
    Ok(logs)
}

/// Everything the continual loop needs beyond the federated basics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualConfig {
    pub strategy: Strategy,
    pub fed: FedConfig,
    pub ewc_lambda: f64,
    /// Batches per client when estimating parameter importance.
    pub ewc_batches: usize,
    /// Stored exemplars per class (per client for the local scope).
    pub replay_budget: usize,
    /// Template for synthetic generation; its `capacity` field is
    /// recomputed per task as `capacity_per_class * classes seen`.
    pub generation: GenerationConfig,
    pub capacity_per_class: usize,
    /// Separate seed for parameter initialization; `None` reuses the run
    /// seed.
    pub init_seed: Option<u64>,
}

/// Output of a full continual run.
#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    pub log: AccuracyLog,
    /// Round diagnostics, one vector per task.
    pub round_logs: Vec<Vec<RoundLog>>,
    /// Generation diagnostics, one per completed generation.
    pub generation_reports: Vec<InversionReport>,
    /// Samples in the synthetic memory after each generation.
    pub memory_sizes: Vec<usize>,
    pub final_params: ParameterVector,
}

/// Called after every federated round with `(task, round, model)`.
pub type RoundObserver<'a> = &'a mut dyn FnMut(usize, usize, &ParameterVector);

/// Train through all tasks in sequence and record an accuracy checkpoint
/// after each, evaluating on the test split over all classes seen so far.
#[allow(clippy::too_many_arguments)]
pub fn run_continual(
    spec: &ModelSpec,
    layout: &Layout,
    train: &LabeledDataset,
    test: &LabeledDataset,
    test_indices: &[usize],
    split: &TaskSplit,
    shards_per_task: &[Vec<ClientShard>],
    cfg: &ContinualConfig,
    seed: u64,
    mut observer: Option<RoundObserver>,
) -> Result<ContinualOutcome> {
    if shards_per_task.len() != split.tasks.len() {
        return Err(Error::InvalidArg(format!(
            "{} shard groups for {} tasks",
            shards_per_task.len(),
            split.tasks.len()
        )));
    }
    let num_tasks = split.tasks.len();
    let num_clients = shards_per_task.first().map_or(0, Vec::len);
    let mut init_rng = stream(cfg.init_seed.unwrap_or(seed), "init");
    let mut select_rng = stream(seed, "select");
    let mut globals = ParameterVector::init(layout, &mut init_rng);

    let mut teacher: Option<ParameterVector> = None;
    let mut memory: Option<SyntheticMemory> = None;
    let mut fisher: Option<FisherDiagonal> = None;
    let mut local_stores: Vec<ExemplarStore> = (0..num_clients)
        .map(|_| ExemplarStore::new(ExemplarScope::Local))
        .collect();
    let mut global_store = ExemplarStore::new(ExemplarScope::Global);

    let mut log = AccuracyLog::new(split.tasks.clone());
    let mut round_logs = Vec::with_capacity(num_tasks);
    let mut generation_reports = Vec::new();
    let mut memory_sizes = Vec::new();

    for task_id in 0..num_tasks {
        if task_id > 0 && !cfg.fed.warm_start {
            globals = ParameterVector::init(layout, &mut init_rng);
        }
        let alpha = cfg.fed.alpha;
        let aux = if task_id == 0 {
            TaskAux::Plain
        } else {
            match cfg.strategy {
                Strategy::Finetune => TaskAux::Plain,
                Strategy::FedLwf => match (&teacher, alpha != 0.0) {
                    (Some(t), true) => TaskAux::Distill { teacher: t, alpha },
                    _ => TaskAux::Plain,
                },
                Strategy::Target => match (&teacher, &memory, alpha != 0.0) {
                    (Some(t), Some(m), true) if !m.is_empty() => {
                        TaskAux::Synthetic { teacher: t, memory: m, alpha }
                    }
                    (_, Some(m), _) if m.is_empty() => {
                        log::warn!("synthetic memory is empty; task {task_id} trains plainly");
                        TaskAux::Plain
                    }
                    _ => TaskAux::Plain,
                },
                Strategy::FedEwc => match &fisher {
                    Some(f) if cfg.ewc_lambda != 0.0 => {
                        TaskAux::Quadratic { fisher: f, lambda: cfg.ewc_lambda }
                    }
                    _ => TaskAux::Plain,
                },
                Strategy::ReplayLocal => TaskAux::ExemplarsLocal { stores: &local_stores },
                Strategy::ReplayGlobal => TaskAux::ExemplarsGlobal { store: &global_store },
            }
        };
        let mut per_round_hook = observer.as_deref_mut().map(|obs| {
            move |round: usize, params: &ParameterVector| obs(task_id, round, params)
        });
        let task_logs = run_task(
            spec,
            layout,
            train,
            &shards_per_task[task_id],
            &mut globals,
            &aux,
            &cfg.fed,
            seed,
            task_id,
            &mut select_rng,
            per_round_hook
                .as_mut()
                .map(|h| h as &mut dyn FnMut(usize, &ParameterVector)),
        )?;
        round_logs.push(task_logs);

        // Post-task bookkeeping for the next task.
        teacher = Some(globals.clone());
        match cfg.strategy {
            Strategy::FedEwc => {
                let new = task_fisher(
                    spec,
                    layout,
                    &globals,
                    train,
                    &shards_per_task[task_id],
                    cfg.ewc_batches,
                    cfg.fed.batch_size,
                    seed,
                    task_id,
                )?;
                fisher = Some(match fisher.take() {
                    None => new,
                    Some(mut acc) => {
                        for (a, n) in
                            acc.importance.values.iter_mut().zip(&new.importance.values)
                        {
                            *a += n;
                        }
                        acc.anchor = new.anchor;
                        acc
                    }
                });
            }
            Strategy::ReplayLocal => {
                for shard in &shards_per_task[task_id] {
                    let mut rng = stream(
                        seed,
                        &format!("exemplar.task{task_id}.client{}", shard.client_id),
                    );
                    exemplar_update(
                        &mut local_stores[shard.client_id],
                        train,
                        &shard.indices,
                        cfg.replay_budget,
                        &mut rng,
                    );
                }
            }
            Strategy::ReplayGlobal => {
                let mut pool: Vec<usize> = shards_per_task[task_id]
                    .iter()
                    .flat_map(|s| s.indices.iter().copied())
                    .collect();
                pool.sort_unstable();
                let mut rng = stream(seed, &format!("exemplar.task{task_id}"));
                exemplar_update(&mut global_store, train, &pool, cfg.replay_budget, &mut rng);
            }
            Strategy::Target => {
                // The memory regenerates from the newest model after each
                // task except the last, whose memory would go unused. A zero
                // distillation weight also skips synthesis: the memory would
                // never be consulted, and training is then identical to
                // plain finetuning step for step.
                if task_id + 1 < num_tasks && cfg.fed.alpha != 0.0 {
                    let seen = split.seen_classes(task_id);
                    let mut gen_cfg = cfg.generation.clone();
                    gen_cfg.capacity = cfg.capacity_per_class * seen.len();
                    let mut rng = stream(seed, &format!("generator.task{task_id}"));
                    let probe = |probe_spec: &ModelSpec, student: &ParameterVector| {
                        let per_class =
                            evaluate(probe_spec, layout, student, test, test_indices, &seen)
                                .unwrap_or_default();
                        if per_class.is_empty() {
                            0.0
                        } else {
                            per_class.values().sum::<f64>() / per_class.len() as f64
                        }
                    };
                    let (mem, report) = data_generation(
                        spec,
                        layout,
                        &globals,
                        &seen,
                        task_id,
                        &gen_cfg,
                        &mut rng,
                        Some(&probe),
                    )?;
                    generation_reports.push(report);
                    memory_sizes.push(mem.len());
                    memory = Some(mem);
                }
            }
            Strategy::Finetune | Strategy::FedLwf => {}
        }

        let seen = split.seen_classes(task_id);
        let checkpoint = evaluate(spec, layout, &globals, test, test_indices, &seen)?;
        log.record(checkpoint);
    }

    Ok(ContinualOutcome {
        log,
        round_logs,
        generation_reports,
        memory_sizes,
        final_params: globals,
    })
}

/// Importance estimate for one finished task: per-client squared-gradient
/// diagonals, averaged with sample-count weights, anchored at the current
/// global model.
#[allow(clippy::too_many_arguments)]
fn task_fisher(
    spec: &ModelSpec,
    layout: &Layout,
    globals: &ParameterVector,
    dataset: &LabeledDataset,
    shards: &[ClientShard],
    num_batches: usize,
    batch_size: usize,
    seed: u64,
    task_id: usize,
) -> Result<FisherDiagonal> {
    let mut diagonals = Vec::new();
    let mut weights = Vec::new();
    for shard in shards {
        if shard.indices.is_empty() {
            continue;
        }
        let mut rng = stream(
            seed,
            &format!("fisher.task{task_id}.client{}", shard.client_id),
        );
        let f = ewc_fisher(
            spec,
            layout,
            globals,
            dataset,
            &shard.indices,
            num_batches,
            batch_size,
            &mut rng,
        )?;
        diagonals.push(f.importance);
        weights.push(shard.indices.len() as f64);
    }
    let importance = if diagonals.is_empty() {
        ParameterVector::zeros(layout)
    } else {
        let refs: Vec<&ParameterVector> = diagonals.iter().collect();
        ParameterVector::weighted_mean(&refs, &weights)?
    };
    Ok(FisherDiagonal { importance, anchor: globals.clone() })
}
