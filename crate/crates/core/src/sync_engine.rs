//! Synchronous training engines: the semi-decentralized protocol, a
//! matrix-form oracle for it, and three baselines.
//!
//! All clients start from one seeded model. Iteration k (1-based) performs
//! one SGD step per client on a batch keyed by (seed, client, k), then:
//!
//! ```text
//! k % tau1 == 0:          intra-cluster aggregation
//!                         y_d = sum_{i in cluster d} m^_i w_i
//! k % (tau1 tau2) == 0:   additionally, alpha gossip rounds Y <- Y P
//!                         over the edge-server graph
//! afterwards:             every client i receives y_{d(i)}
//! ```
//!
//! After the K-th iteration (K must be a multiple of tau1 * tau2) a closing
//! consensus phase gossips the cluster models until they agree pairwise
//! within 1e-9 (at most 200 rounds) and the run reports their weighted mean
//! as the global model. The baselines differ only in the aggregation rule:
//!
//! - cloud-hierarchical: gossip replaced by exact cloud averaging
//!   `u = Y m~` broadcast to everyone (with a fully connected edge graph
//!   and equal cluster weights the two protocols coincide iteration by
//!   iteration);
//! - cloud-only: every tau1 iterations all clients average directly,
//!   `u = W m`;
//! - edge-only: a single server samples 5 clients per round without
//!   replacement; only they train, and their plain average is broadcast.
//!
//! The matrix oracle expresses one protocol iteration as a
//! right-multiplication of the client-model matrix,
//!
//! ```text
//! W_k = (W_{k-1} - eta G_k) T_k,   T_k in { I, V B, V P^alpha B }
//! v^{i,d} = m^_i [i in cluster d],  b^{d,i} = [i in cluster d],
//! ```
//!
//! using the same batch keys, so the two implementations must agree to
//! round-off at every iteration. Both record per-iteration model snapshots
//! when asked. Because every T_k fixes the client-weight vector
//! (`T_k m = m`), the weighted global model moves only through gradients:
//! `u_k = u_{k-1} - eta G_k m`.
//!
//! The wall-clock column charges computing per iteration (at the slowest
//! client's speed), the client <-> server link per intra round, and the
//! scheme's inter-cluster cost per inter round; the closing consensus phase
//! is an accounting device and costs nothing.

use crate::data::{Dataset, Partition};
use crate::latency::{scheme_elapsed, LatencyParams, Scheme, SyncSchedule};
use crate::models::{sample_batch, ModelSpec};
use crate::numerics::DenseMatrix;
use crate::rng::{stream, StreamKind};
use crate::topology::{
    build_mixing, consensus_round, max_pairwise_distance, weighted_mean, MixingMatrix,
    ServerGraph,
};
use crate::trace::{EventKind, RunTrace, TraceRow};
use crate::{Error, Result};

/// Schedule and optimizer settings of a synchronous run.
#[derive(Debug, Clone)]
pub struct SyncConfig {
    /// Total local iterations K; must be a multiple of `tau1 * tau2`.
    pub k: usize,
    /// Iterations per intra-cluster aggregation.
    pub tau1: usize,
    /// Intra-cluster rounds per inter-cluster round.
    pub tau2: usize,
    /// Gossip rounds per inter-cluster aggregation.
    pub alpha: usize,
    /// SGD learning rate.
    pub eta: f64,
    /// Mini-batch size (values at or above a shard use the full shard).
    pub batch_size: usize,
    /// Seed for initialization and batch draws.
    pub seed: u64,
    /// Keep a per-iteration snapshot of every client model.
    pub record_models: bool,
}

/// Everything a run needs besides its schedule.
#[derive(Debug, Clone, Copy)]
pub struct RunInputs<'a> {
    pub dataset: &'a Dataset,
    pub partition: &'a Partition,
    pub graph: &'a ServerGraph,
    pub spec: &'a ModelSpec,
    /// Held-out data for the accuracy column.
    pub eval: Option<&'a Dataset>,
    pub latency: &'a LatencyParams,
    /// Relative client speeds (empty = unit speed for everyone). The wall
    /// clock advances at the slowest client's pace.
    pub client_speeds: &'a [f64],
}

const CONSENSUS_TOL: f64 = 1e-9;
const MAX_CONSENSUS_ROUNDS: usize = 200;
/// Participants per round of the edge-only baseline.
const FEEL_PARTICIPANTS: usize = 5;

struct Ctx {
    clients: usize,
    servers: usize,
    comp: f64,
    schedule: SyncSchedule,
    all_indices: Vec<usize>,
    eval_indices: Option<Vec<usize>>,
}

fn validate(cfg: &SyncConfig, inputs: &RunInputs) -> Result<Ctx> {
    if cfg.k == 0 || cfg.tau1 == 0 || cfg.tau2 == 0 || cfg.alpha == 0 {
        return Err(Error::Config(
            "iteration counts k, tau1, tau2, alpha must be positive".into(),
        ));
    }
    if cfg.k % (cfg.tau1 * cfg.tau2) != 0 {
        return Err(Error::Config(format!(
            "k = {} must be a multiple of tau1 * tau2 = {}",
            cfg.k,
            cfg.tau1 * cfg.tau2
        )));
    }
    if !(cfg.eta > 0.0) || !cfg.eta.is_finite() {
        return Err(Error::Config(format!("eta = {} must be positive", cfg.eta)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    inputs.latency.validate()?;
    let clients = inputs.partition.num_clients();
    let servers = inputs.partition.num_servers();
    if servers != inputs.graph.len() {
        return Err(Error::Config(format!(
            "partition has {servers} clusters but the graph has {} servers",
            inputs.graph.len()
        )));
    }
    for (d, (&gw, &pw)) in inputs
        .graph
        .cluster_weights()
        .iter()
        .zip(inputs.partition.m_tilde())
        .enumerate()
    {
        if (gw - pw).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "graph weight {gw} for server {d} does not match partition weight {pw}"
            )));
        }
    }
    let min_speed = if inputs.client_speeds.is_empty() {
        1.0
    } else {
        if inputs.client_speeds.len() != clients {
            return Err(Error::Config(format!(
                "{} client speeds for {clients} clients",
                inputs.client_speeds.len()
            )));
        }
        let min = inputs.client_speeds.iter().fold(f64::INFINITY, |m, &s| m.min(s));
        if !(min > 0.0) {
            return Err(Error::Config("client speeds must be positive".into()));
        }
        min
    };
    Ok(Ctx {
        clients,
        servers,
        comp: inputs.latency.comp_time(min_speed),
        schedule: SyncSchedule {
            k: cfg.k,
            tau1: cfg.tau1,
            tau2: cfg.tau2,
            alpha: cfg.alpha,
        },
        all_indices: (0..inputs.dataset.len()).collect(),
        eval_indices: inputs.eval.map(|ds| (0..ds.len()).collect()),
    })
}

/// Initial client-model matrix: every column is the same seeded vector.
fn init_models(inputs: &RunInputs, clients: usize, seed: u64) -> DenseMatrix {
    let w0 = inputs.spec.init(seed);
    DenseMatrix::from_fn(w0.len(), clients, |i, _| w0[i])
}

/// One local SGD pass over all clients (iteration `k`, 1-based).
fn local_pass(
    w: &mut DenseMatrix,
    cfg: &SyncConfig,
    inputs: &RunInputs,
    k: usize,
    active: Option<&[usize]>,
) -> Result<()> {
    let clients: Vec<usize> = match active {
        Some(list) => list.to_vec(),
        None => (0..w.cols()).collect(),
    };
    for i in clients {
        let mut col = w.col(i);
        let batch = sample_batch(
            inputs.partition.shard(i),
            cfg.batch_size,
            cfg.seed,
            i as u64,
            k as u64,
        );
        let g = inputs.spec.grad(&col, inputs.dataset, &batch);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(k));
        }
        for (w_j, g_j) in col.iter_mut().zip(&g) {
            *w_j -= cfg.eta * g_j;
        }
        // The step itself can overflow even on a finite gradient.
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(k));
        }
        w.set_col(i, &col);
    }
    Ok(())
}

/// Cluster models `y_d = sum_{i in d} m^_i w_i` as an M x D matrix.
fn intra_aggregate(w: &DenseMatrix, partition: &Partition) -> DenseMatrix {
    let mut y = DenseMatrix::zeros(w.rows(), partition.num_servers());
    for i in 0..partition.num_clients() {
        let d = partition.cluster_of(i);
        let m_hat = partition.m_hat()[i];
        for r in 0..w.rows() {
            y[(r, d)] += m_hat * w[(r, i)];
        }
    }
    y
}

/// Every client receives its cluster's model.
fn broadcast(w: &mut DenseMatrix, y: &DenseMatrix, partition: &Partition) {
    for i in 0..partition.num_clients() {
        let d = partition.cluster_of(i);
        for r in 0..w.rows() {
            w[(r, i)] = y[(r, d)];
        }
    }
}

fn log_row(
    rows: &mut Vec<TraceRow>,
    inputs: &RunInputs,
    ctx: &Ctx,
    k: usize,
    wall: f64,
    global: &[f64],
    cluster_models: &DenseMatrix,
    event: EventKind,
) {
    let loss = inputs.spec.loss(global, inputs.dataset, &ctx.all_indices);
    let acc = match (&inputs.eval, &ctx.eval_indices) {
        (Some(eval), Some(idx)) => Some(inputs.spec.accuracy(global, eval, idx)),
        _ => None,
    };
    rows.push(TraceRow::sync(
        k,
        wall,
        loss,
        acc,
        max_pairwise_distance(cluster_models),
        event,
    ));
}

/// Gossips cluster models to agreement and returns the weighted mean.
fn consensus_phase(mut y: DenseMatrix, mix: &MixingMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
    let mut rounds = 0;
    while max_pairwise_distance(&y) > CONSENSUS_TOL && rounds < MAX_CONSENSUS_ROUNDS {
        y = consensus_round(&y, mix)?;
        rounds += 1;
    }
    let global = weighted_mean(&y, mix.weights())?;
    Ok((y, global))
}

/// Runs the semi-decentralized protocol.
pub fn run_sdfeel(cfg: &SyncConfig, inputs: &RunInputs) -> Result<RunTrace> {
    let ctx = validate(cfg, inputs)?;
    let mix = build_mixing(inputs.graph)?;
    let mut w = init_models(inputs, ctx.clients, cfg.seed);
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    if cfg.record_models {
        snapshots.push(w.clone());
    }
    let u0 = w.mul_vec(inputs.partition.m())?;
    log_row(
        &mut rows,
        inputs,
        &ctx,
        0,
        0.0,
        &u0,
        &intra_aggregate(&w, inputs.partition),
        EventKind::Start,
    );

    for k in 1..=cfg.k {
        local_pass(&mut w, cfg, inputs, k, None)?;
        if k % cfg.tau1 == 0 {
            let mut y = intra_aggregate(&w, inputs.partition);
            let event = if k % (cfg.tau1 * cfg.tau2) == 0 {
                for _ in 0..cfg.alpha {
                    y = consensus_round(&y, &mix)?;
                }
                EventKind::Inter
            } else {
                EventKind::Intra
            };
            broadcast(&mut w, &y, inputs.partition);
            let wall = scheme_elapsed(Scheme::Sdfeel, inputs.latency, ctx.comp, &ctx.schedule, k)?;
            let u = w.mul_vec(inputs.partition.m())?;
            log_row(&mut rows, inputs, &ctx, k, wall, &u, &y, event);
        }
        if cfg.record_models {
            snapshots.push(w.clone());
        }
    }

    let y = intra_aggregate(&w, inputs.partition);
    let (y, global) = consensus_phase(y, &mix)?;
    let total = scheme_elapsed(Scheme::Sdfeel, inputs.latency, ctx.comp, &ctx.schedule, cfg.k)?;
    log_row(&mut rows, inputs, &ctx, cfg.k, total, &global, &y, EventKind::Final);
    Ok(RunTrace {
        rows,
        final_params: global,
        model_snapshots: snapshots,
        total_time_s: total,
        peak_gap: None,
    })
}

/// Runs the matrix-form oracle of the semi-decentralized protocol: the same
/// batches and schedule, with each aggregation applied as one
/// right-multiplication by `T_k`.
pub fn matrix_oracle(cfg: &SyncConfig, inputs: &RunInputs) -> Result<RunTrace> {
    let ctx = validate(cfg, inputs)?;
    let mix = build_mixing(inputs.graph)?;
    let clients = ctx.clients;
    let servers = ctx.servers;

    let v = DenseMatrix::from_fn(clients, servers, |i, d| {
        if inputs.partition.cluster_of(i) == d {
            inputs.partition.m_hat()[i]
        } else {
            0.0
        }
    });
    let b = DenseMatrix::from_fn(servers, clients, |d, i| {
        if inputs.partition.cluster_of(i) == d {
            1.0
        } else {
            0.0
        }
    });
    let mut p_alpha = mix.p.clone();
    for _ in 1..cfg.alpha {
        p_alpha = p_alpha.matmul(&mix.p)?;
    }
    let t_intra = v.matmul(&b)?;
    let t_inter = v.matmul(&p_alpha)?.matmul(&b)?;

    let mut w = init_models(inputs, clients, cfg.seed);
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    if cfg.record_models {
        snapshots.push(w.clone());
    }
    let u0 = w.mul_vec(inputs.partition.m())?;
    log_row(
        &mut rows,
        inputs,
        &ctx,
        0,
        0.0,
        &u0,
        &intra_aggregate(&w, inputs.partition),
        EventKind::Start,
    );

    for k in 1..=cfg.k {
        local_pass(&mut w, cfg, inputs, k, None)?;
        if k % cfg.tau1 == 0 {
            let t_k = if k % (cfg.tau1 * cfg.tau2) == 0 {
                &t_inter
            } else {
                &t_intra
            };
            w = w.matmul(t_k)?;
            let event = if k % (cfg.tau1 * cfg.tau2) == 0 {
                EventKind::Inter
            } else {
                EventKind::Intra
            };
            let wall = scheme_elapsed(Scheme::Sdfeel, inputs.latency, ctx.comp, &ctx.schedule, k)?;
            let u = w.mul_vec(inputs.partition.m())?;
            log_row(
                &mut rows,
                inputs,
                &ctx,
                k,
                wall,
                &u,
                &intra_aggregate(&w, inputs.partition),
                event,
            );
        }
        if cfg.record_models {
            snapshots.push(w.clone());
        }
    }

    let y = intra_aggregate(&w, inputs.partition);
    let (y, global) = consensus_phase(y, &mix)?;
    let total = scheme_elapsed(Scheme::Sdfeel, inputs.latency, ctx.comp, &ctx.schedule, cfg.k)?;
    log_row(&mut rows, inputs, &ctx, cfg.k, total, &global, &y, EventKind::Final);
    Ok(RunTrace {
        rows,
        final_params: global,
        model_snapshots: snapshots,
        total_time_s: total,
        peak_gap: None,
    })
}

/// Runs the cloud-hierarchical baseline: intra-cluster aggregation every
/// tau1 iterations, exact cloud averaging every tau1 * tau2.
pub fn run_hierfavg(cfg: &SyncConfig, inputs: &RunInputs) -> Result<RunTrace> {
    let ctx = validate(cfg, inputs)?;
    let mut w = init_models(inputs, ctx.clients, cfg.seed);
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    if cfg.record_models {
        snapshots.push(w.clone());
    }
    let u0 = w.mul_vec(inputs.partition.m())?;
    log_row(
        &mut rows,
        inputs,
        &ctx,
        0,
        0.0,
        &u0,
        &intra_aggregate(&w, inputs.partition),
        EventKind::Start,
    );

    let mut last_global = u0;
    for k in 1..=cfg.k {
        local_pass(&mut w, cfg, inputs, k, None)?;
        if k % cfg.tau1 == 0 {
            let mut y = intra_aggregate(&w, inputs.partition);
            let event = if k % (cfg.tau1 * cfg.tau2) == 0 {
                let global = weighted_mean(&y, inputs.partition.m_tilde())?;
                y = DenseMatrix::from_fn(y.rows(), ctx.servers, |r, _| global[r]);
                EventKind::Inter
            } else {
                EventKind::Intra
            };
            broadcast(&mut w, &y, inputs.partition);
            let wall =
                scheme_elapsed(Scheme::Hierfavg, inputs.latency, ctx.comp, &ctx.schedule, k)?;
            let u = w.mul_vec(inputs.partition.m())?;
            log_row(&mut rows, inputs, &ctx, k, wall, &u, &y, event);
            last_global = u;
        }
        if cfg.record_models {
            snapshots.push(w.clone());
        }
    }

    let total = scheme_elapsed(Scheme::Hierfavg, inputs.latency, ctx.comp, &ctx.schedule, cfg.k)?;
    let y = intra_aggregate(&w, inputs.partition);
    log_row(&mut rows, inputs, &ctx, cfg.k, total, &last_global, &y, EventKind::Final);
    Ok(RunTrace {
        rows,
        final_params: last_global,
        model_snapshots: snapshots,
        total_time_s: total,
        peak_gap: None,
    })
}

/// Runs the cloud-only baseline: all clients average through the cloud
/// every tau1 iterations.
pub fn run_fedavg(cfg: &SyncConfig, inputs: &RunInputs) -> Result<RunTrace> {
    let ctx = validate(cfg, inputs)?;
    let mut w = init_models(inputs, ctx.clients, cfg.seed);
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    if cfg.record_models {
        snapshots.push(w.clone());
    }
    let u0 = w.mul_vec(inputs.partition.m())?;
    log_row(
        &mut rows,
        inputs,
        &ctx,
        0,
        0.0,
        &u0,
        &intra_aggregate(&w, inputs.partition),
        EventKind::Start,
    );

    let mut last_global = u0;
    for k in 1..=cfg.k {
        local_pass(&mut w, cfg, inputs, k, None)?;
        if k % cfg.tau1 == 0 {
            let global = w.mul_vec(inputs.partition.m())?;
            for i in 0..ctx.clients {
                w.set_col(i, &global);
            }
            let wall = scheme_elapsed(Scheme::Fedavg, inputs.latency, ctx.comp, &ctx.schedule, k)?;
            let y = intra_aggregate(&w, inputs.partition);
            log_row(&mut rows, inputs, &ctx, k, wall, &global, &y, EventKind::Inter);
            last_global = global;
        }
        if cfg.record_models {
            snapshots.push(w.clone());
        }
    }

    let total = scheme_elapsed(Scheme::Fedavg, inputs.latency, ctx.comp, &ctx.schedule, cfg.k)?;
    let y = intra_aggregate(&w, inputs.partition);
    log_row(&mut rows, inputs, &ctx, cfg.k, total, &last_global, &y, EventKind::Final);
    Ok(RunTrace {
        rows,
        final_params: last_global,
        model_snapshots: snapshots,
        total_time_s: total,
        peak_gap: None,
    })
}

/// Participants of the edge-only baseline for the given round: a uniform
/// draw without replacement, deterministic in (seed, round).
pub(crate) fn feel_participants(clients: usize, seed: u64, round: u64) -> Vec<usize> {
    let count = FEEL_PARTICIPANTS.min(clients);
    let mut rng = stream(seed, StreamKind::FeelSampling, &[round]);
    let mut picked = rand::seq::index::sample(&mut rng, clients, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Runs the edge-only baseline: one server, 5 sampled participants per
/// round, plain averaging.
pub fn run_feel(cfg: &SyncConfig, inputs: &RunInputs) -> Result<RunTrace> {
    let ctx = validate(cfg, inputs)?;
    let mut w = init_models(inputs, ctx.clients, cfg.seed);
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    if cfg.record_models {
        snapshots.push(w.clone());
    }
    let u0 = w.mul_vec(inputs.partition.m())?;
    log_row(
        &mut rows,
        inputs,
        &ctx,
        0,
        0.0,
        &u0,
        &intra_aggregate(&w, inputs.partition),
        EventKind::Start,
    );

    let mut last_global = u0;
    for k in 1..=cfg.k {
        let round = (k - 1) / cfg.tau1;
        let active = feel_participants(ctx.clients, cfg.seed, round as u64);
        local_pass(&mut w, cfg, inputs, k, Some(&active))?;
        if k % cfg.tau1 == 0 {
            let mut global = vec![0.0; w.rows()];
            for &i in &active {
                let col = w.col(i);
                for (g, c) in global.iter_mut().zip(&col) {
                    *g += c;
                }
            }
            for g in &mut global {
                *g /= active.len() as f64;
            }
            for i in 0..ctx.clients {
                w.set_col(i, &global);
            }
            let wall = scheme_elapsed(Scheme::Feel, inputs.latency, ctx.comp, &ctx.schedule, k)?;
            let y = intra_aggregate(&w, inputs.partition);
            log_row(&mut rows, inputs, &ctx, k, wall, &global, &y, EventKind::Intra);
            last_global = global;
        }
        if cfg.record_models {
            snapshots.push(w.clone());
        }
    }

    let total = scheme_elapsed(Scheme::Feel, inputs.latency, ctx.comp, &ctx.schedule, cfg.k)?;
    let y = intra_aggregate(&w, inputs.partition);
    log_row(&mut rows, inputs, &ctx, cfg.k, total, &last_global, &y, EventKind::Final);
    Ok(RunTrace {
        rows,
        final_params: last_global,
        model_snapshots: snapshots,
        total_time_s: total,
        peak_gap: None,
    })
}
