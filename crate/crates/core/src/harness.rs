//! Experiment orchestration: materializes a configuration into data,
//! topology, and model objects, runs every (scheme, seed) pair, and writes
//! one trace CSV per run plus a summary CSV.
//!
//! Runs are deterministic per seed: the dataset is fixed by `data.seed`,
//! while partitioning, cluster assignment, initialization, and batch draws
//! key off the run seed through named streams. Distinct (scheme, seed)
//! pairs execute concurrently; each writes its own trace file, and the
//! summary is written after all runs join, so two invocations of the same
//! config produce byte-identical outputs.
//!
//! ```text
//! output/
//!   sdfeel_seed1.csv      one RunTrace per (scheme, seed)
//!   hierfavg_seed1.csv
//!   summary.csv           scheme,seed,time_to_target_s,final_loss,final_acc
//! ```
//!
//! `time_to_target_s` is the first wall-clock time at which the global loss
//! crosses `target_loss`, and `inf` when it never does (or when the
//! threshold is disabled). The `SDFEEL_SEED` environment variable overrides
//! the configured seed list with a single seed.

use crate::async_engine::run_async;
use crate::config::ExperimentConfig;
use crate::data::{
    assign_clusters, load_idx, partition_dirichlet, partition_iid, partition_label_skew,
    synth_dataset_split, Dataset, Partition,
};
use crate::latency::Scheme;
use crate::models::ModelSpec;
use crate::sync_engine::{run_fedavg, run_feel, run_hierfavg, run_sdfeel, RunInputs};
use crate::theory::{eval_sync_bound, BoundInputs};
use crate::topology::{build_mixing, ServerGraph};
use crate::trace::RunTrace;
use crate::{Error, Result};
use std::path::{Path, PathBuf};

/// Materialized inputs for one run seed.
#[derive(Debug)]
pub struct World {
    pub dataset: Dataset,
    /// Held-out data for the accuracy column, when configured.
    pub eval: Option<Dataset>,
    pub partition: Partition,
    pub graph: ServerGraph,
    pub spec: ModelSpec,
}

/// Builds the dataset, partition, server graph, and model for one seed.
///
/// The dataset depends only on the `[data]` block; the partition, cluster
/// assignment, and any randomized topology key off `seed`.
///
/// # Errors
///
/// [`Error::Config`] for inconsistent blocks, [`Error::Io`] /
/// [`Error::IdxParse`] for unreadable IDX files.
pub fn build_world(cfg: &ExperimentConfig, seed: u64) -> Result<World> {
    let (dataset, eval) = match cfg.data.kind.as_str() {
        "synth" => {
            let d = &cfg.data;
            let ds = synth_dataset_split(d.classes, d.per_class, d.dim, d.seed, 0)?;
            let eval = if d.eval_per_class > 0 {
                Some(synth_dataset_split(
                    d.classes,
                    d.eval_per_class,
                    d.dim,
                    d.seed,
                    1,
                )?)
            } else {
                None
            };
            (ds, eval)
        }
        "idx" => {
            let d = &cfg.data;
            let ds = load_idx(Path::new(&d.images), Path::new(&d.labels))?;
            let eval = if d.eval_images.is_empty() {
                None
            } else {
                Some(load_idx(
                    Path::new(&d.eval_images),
                    Path::new(&d.eval_labels),
                )?)
            };
            (ds, eval)
        }
        other => return Err(Error::Config(format!("data.kind: unknown kind \"{other}\""))),
    };

    let clients = cfg.partition.clients;
    let servers = cfg.topology.servers;
    let shards = match cfg.partition.kind.as_str() {
        "iid" => partition_iid(&dataset, clients, seed)?,
        "label-skew" => {
            partition_label_skew(&dataset, clients, cfg.partition.classes_per_client, seed)?
        }
        "dirichlet" => partition_dirichlet(&dataset, clients, cfg.partition.beta, seed)?,
        other => {
            return Err(Error::Config(format!(
                "partition.kind: unknown kind \"{other}\""
            )))
        }
    };
    let map = assign_clusters(clients, servers, cfg.partition.gamma, seed)?;
    let partition = Partition::new(shards, map, servers, dataset.len())?;

    let weights = partition.m_tilde().to_vec();
    let graph = match cfg.topology.kind.as_str() {
        "ring" => ServerGraph::ring(servers, &weights)?,
        "star" => ServerGraph::star(servers, &weights)?,
        "full" => ServerGraph::full(servers, &weights)?,
        "partial" => ServerGraph::partial(servers, &weights)?,
        "random" => {
            ServerGraph::random_connected(servers, cfg.topology.extra_edges, &weights, seed)?
        }
        other => {
            return Err(Error::Config(format!(
                "topology.kind: unknown kind \"{other}\""
            )))
        }
    };

    let spec = match cfg.model.kind.as_str() {
        "softmax" => ModelSpec::softmax_for(&dataset),
        "mlp" => ModelSpec::mlp_for(&dataset, cfg.model.hidden),
        other => return Err(Error::Config(format!("model.kind: unknown kind \"{other}\""))),
    };

    Ok(World {
        dataset,
        eval,
        partition,
        graph,
        spec,
    })
}

/// Runs one scheme against a materialized world.
///
/// # Errors
///
/// Propagates engine errors; [`Error::Config`] for a malformed schedule.
pub fn run_scheme(
    cfg: &ExperimentConfig,
    world: &World,
    scheme: Scheme,
    seed: u64,
) -> Result<RunTrace> {
    let latency = cfg.latency_params();
    let inputs = RunInputs {
        dataset: &world.dataset,
        partition: &world.partition,
        graph: &world.graph,
        spec: &world.spec,
        eval: world.eval.as_ref(),
        latency: &latency,
        client_speeds: &cfg.speeds,
    };
    match scheme {
        Scheme::Sdfeel => run_sdfeel(&cfg.sync_config(seed), &inputs),
        Scheme::SdfeelAsync => run_async(&cfg.async_config(seed)?, &inputs),
        Scheme::Hierfavg => run_hierfavg(&cfg.sync_config(seed), &inputs),
        Scheme::Fedavg => run_fedavg(&cfg.sync_config(seed), &inputs),
        Scheme::Feel => run_feel(&cfg.sync_config(seed), &inputs),
    }
}

/// Seed list for a run, honoring the `SDFEEL_SEED` override.
fn effective_seeds(cfg: &ExperimentConfig) -> Result<Vec<u64>> {
    match std::env::var("SDFEEL_SEED") {
        Ok(text) => {
            let seed = text.trim().parse::<u64>().map_err(|_| {
                Error::Config(format!("SDFEEL_SEED: \"{text}\" is not a valid seed"))
            })?;
            Ok(vec![seed])
        }
        Err(_) => Ok(cfg.seeds.clone()),
    }
}

/// When `[bounds]` constants are supplied, rejects a learning rate that
/// fails the feasibility check; otherwise logs that the rate is unchecked.
fn check_learning_rate(cfg: &ExperimentConfig, world: &World) -> Result<()> {
    if !cfg.wants_sync()? {
        return Ok(());
    }
    let Some(b) = &cfg.bounds else {
        log::warn!(
            "sync.eta = {} runs unchecked: no [bounds] constants supplied",
            cfg.sync.eta
        );
        return Ok(());
    };
    let mix = build_mixing(&world.graph)?;
    let inputs = BoundInputs {
        l: b.l,
        sigma2: b.sigma2,
        kappa2: b.kappa2,
        eta: cfg.sync.eta,
        tau1: cfg.sync.tau1,
        tau2: cfg.sync.tau2,
        alpha: cfg.sync.alpha,
        zeta: mix.zeta,
        weights: world.partition.m().to_vec(),
        delta: b.delta,
        k: cfg.sync.k,
    };
    let out = eval_sync_bound(&inputs)?;
    if !out.lr_feasible {
        return Err(Error::Config(format!(
            "sync.eta = {} fails the learning-rate feasibility check for the supplied [bounds] constants",
            cfg.sync.eta
        )));
    }
    Ok(())
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    /// One trace CSV per (scheme, seed), in config order.
    pub trace_paths: Vec<PathBuf>,
    /// The summary CSV, written after all runs complete.
    pub summary_path: PathBuf,
}

fn fmt_opt(v: Option<f64>, none: &str) -> String {
    v.map(|x| format!("{x}")).unwrap_or_else(|| none.to_string())
}

/// Runs every (scheme, seed) pair of a validated config and writes the
/// trace and summary CSVs into the output directory.
///
/// Config problems are reported before any run starts. Runs execute
/// concurrently; outputs are written in config order once all runs join.
///
/// # Errors
///
/// [`Error::Config`] for invalid configuration, [`Error::Io`] for
/// unwritable outputs, plus any engine error from the runs themselves.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let schemes = cfg.scheme_list()?;
    let seeds = effective_seeds(cfg)?;
    let out_dir = PathBuf::from(&cfg.output);
    std::fs::create_dir_all(&out_dir)?;

    let worlds: Vec<(u64, World)> = seeds
        .iter()
        .map(|&s| build_world(cfg, s).map(|w| (s, w)))
        .collect::<Result<_>>()?;
    check_learning_rate(cfg, &worlds[0].1)?;

    let jobs: Vec<(Scheme, u64, &World)> = schemes
        .iter()
        .flat_map(|&scheme| worlds.iter().map(move |(seed, world)| (scheme, *seed, world)))
        .collect();
    let results: Vec<Result<RunTrace>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(scheme, seed, world)| scope.spawn(move || run_scheme(cfg, world, scheme, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("a run thread panicked"))
            .collect()
    });

    let mut trace_paths = Vec::new();
    let mut summary = String::from("scheme,seed,time_to_target_s,final_loss,final_acc\n");
    for ((scheme, seed, _), result) in jobs.iter().zip(results) {
        let trace = result?;
        let path = out_dir.join(format!("{scheme}_seed{seed}.csv"));
        let mut buf = Vec::new();
        trace.write_csv(&mut buf, *scheme == Scheme::SdfeelAsync)?;
        std::fs::write(&path, buf)?;
        let ttt = if cfg.target_loss > 0.0 {
            trace.time_to_target(cfg.target_loss)
        } else {
            None
        };
        summary.push_str(&format!(
            "{scheme},{seed},{},{},{}\n",
            fmt_opt(ttt, "inf"),
            trace.final_loss(),
            fmt_opt(trace.final_acc(), "nan"),
        ));
        trace_paths.push(path);
    }
    let summary_path = out_dir.join("summary.csv");
    std::fs::write(&summary_path, summary)?;
    Ok(ExperimentOutput {
        trace_paths,
        summary_path,
    })
}
