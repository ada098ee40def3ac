//! Event-driven training engine: per-cluster deadlines, normalized local
//! updates, and staleness-aware gossip over a virtual clock.
//!
//! Each cluster d repeats a fixed-length iteration of duration
//! `T_iter^(d) = deadline_d + T_ct_sr + T_sr_sr`. When it completes one, the
//! global event counter t advances and the cluster:
//!
//! 1. collects from each member the normalized update of theta_i local
//!    mini-batch steps from the cluster's last broadcast base b_d,
//!
//!    ```text
//!    Delta_i = (w_theta - b_d) / theta_i,
//!    ```
//!
//! 2. forms `y^_d = y_d + theta-bar_d * sum_i m^_i Delta_i` with
//!    `theta-bar_d = sum_i m^_i theta_i` (equal thetas make this plain
//!    weighted model averaging),
//!
//! 3. gossips with its neighbors through the staleness mixing matrix built
//!    from iteration gaps `delta^(j) = t_pre - t'(j)` (the trigger's own gap
//!    is 0), where `t_pre` is the event counter before the current instant
//!    and `t'(j)` is the counter at the end of the instant in which j last
//!    completed,
//!
//! 4. broadcasts its new `y_d` to its clients as the base for their next
//!    iteration. Neighbor clusters keep computing from their old base and
//!    see their updated model only at their own next completion.
//!
//! Completions sharing the same instant are processed in ascending cluster
//! id against the same pre-instant gap snapshot, and the triggers' new
//! bases and `t'` entries are captured after the whole instant settles.
//! Under this bookkeeping simultaneous completions never count toward each
//! other's staleness, so a fleet with identical deadlines runs at gap 0 and
//! degenerates to the synchronous protocol.
//!
//! theta_i is derived from the client speed: `round(h_i * beta_c *
//! deadline_d)` clamped into `[theta_min, theta_max]` (clamping is logged).
//! The default `beta_c = c_cpu / n_mac` makes the raw value the number of
//! unit-speed iterations that fit in the deadline.
//!
//! The run stops once t reaches the event budget, finishes with the same
//! consensus phase as the synchronous engine (the static Laplacian mixing:
//! once training stops all gaps are equal), and reports the weighted mean.
//! [`delta_max`] evaluates the worst-case iteration gap
//! `sum_d (ceil(T_slowest / T_d) - 1)`, which the event loop asserts as an
//! online invariant and the trace reports as the observed peak.

use crate::data::Dataset;
use crate::latency::async_iter_time;
use crate::models::{sample_batch, ModelSpec};
use crate::numerics::DenseMatrix;
use crate::sync_engine::RunInputs;
use crate::topology::{
    build_mixing, build_staleness_mixing, consensus_round, max_pairwise_distance, weighted_mean,
    Psi, ServerGraph, StalenessMixing,
};
use crate::trace::{EventKind, RunTrace, TraceRow};
use crate::{Error, Result};

/// Settings of an event-driven run.
#[derive(Debug, Clone)]
pub struct AsyncConfig {
    /// Total completion events to process (the iteration budget T).
    pub total_events: usize,
    /// SGD learning rate.
    pub eta: f64,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Seed for initialization and batch draws.
    pub seed: u64,
    /// Staleness weight family for the mixing matrix.
    pub psi: Psi,
    /// Per-cluster computing deadlines in seconds.
    pub deadlines: Vec<f64>,
    /// Lower clamp for per-client local update counts.
    pub theta_min: usize,
    /// Upper clamp for per-client local update counts.
    pub theta_max: usize,
    /// Speed-to-updates coefficient; defaults to `c_cpu / n_mac`.
    pub beta_c: Option<f64>,
    /// Keep a snapshot of the cluster models after every event.
    pub record_models: bool,
}

/// Planning bound on the iteration gap for fixed per-cluster iteration
/// times: `sum_d (ceil(T_slowest / T_d) - 1)`.
///
/// The formula counts how many rounds each cluster fits strictly inside one
/// round of the slowest. It is exact when every ratio `T_slowest / T_d` is
/// an integer (each window then holds exactly `ratio - 1` interior
/// completions, the aligned endpoints being simultaneous); for incommensurate
/// times a window can hold one completion more, so the engine checks runs
/// against the looser [`gap_ceiling`] instead.
///
/// A 1e-9 slack absorbs round-off in the ratios before the ceiling.
pub fn delta_max(iter_times: &[f64]) -> usize {
    let slowest = iter_times.iter().fold(0.0f64, |m, &t| m.max(t));
    if slowest <= 0.0 {
        return 0;
    }
    iter_times
        .iter()
        .map(|&t| ((slowest / t - 1e-9).ceil() as usize).saturating_sub(1))
        .sum()
}

/// Gap ceiling valid for arbitrary iteration times.
///
/// Between two consecutive completions of cluster `j` lies an open window of
/// length `T_j`, and a cluster with period `T_d` completes at most
/// `floor(T_j / T_d) + 1` times strictly inside any open interval of that
/// length. The stale count of `j` never exceeds the events that fit in its
/// own window, so the maximum over `j` of the summed per-window counts
/// bounds every gap the run can produce.
fn gap_ceiling(iter_times: &[f64]) -> usize {
    (0..iter_times.len())
        .map(|j| {
            iter_times
                .iter()
                .enumerate()
                .filter(|&(d, _)| d != j)
                .map(|(_, &t)| (iter_times[j] / t + 1e-9).floor() as usize + 1)
                .sum()
        })
        .max()
        .unwrap_or(0)
}

/// Normalized update of one client: `theta` mini-batch steps from `base`,
/// divided by `theta`. Batches are keyed by the client's cumulative step
/// counter starting at `step_base + 1`.
///
/// # Errors
///
/// [`Error::Diverged`] (iteration 0; the caller relabels) on a non-finite
/// gradient.
#[allow(clippy::too_many_arguments)]
pub fn local_update_async(
    spec: &ModelSpec,
    ds: &Dataset,
    shard: &[usize],
    base: &[f64],
    theta: usize,
    eta: f64,
    batch_size: usize,
    seed: u64,
    client: u64,
    step_base: u64,
) -> Result<Vec<f64>> {
    let w = local_endpoint(spec, ds, shard, base, theta, eta, batch_size, seed, client, step_base)?;
    let inv = 1.0 / theta as f64;
    Ok(w.iter().zip(base).map(|(wt, b)| (wt - b) * inv).collect())
}

/// Raw endpoint of the same walk: `theta` steps from `base`, unnormalized.
#[allow(clippy::too_many_arguments)]
fn local_endpoint(
    spec: &ModelSpec,
    ds: &Dataset,
    shard: &[usize],
    base: &[f64],
    theta: usize,
    eta: f64,
    batch_size: usize,
    seed: u64,
    client: u64,
    step_base: u64,
) -> Result<Vec<f64>> {
    assert!(theta >= 1, "theta must be at least 1");
    let mut w = base.to_vec();
    for s in 1..=theta {
        let batch = sample_batch(shard, batch_size, seed, client, step_base + s as u64);
        let g = spec.grad(&w, ds, &batch);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(0));
        }
        for (w_j, g_j) in w.iter_mut().zip(&g) {
            *w_j -= eta * g_j;
        }
        // A finite gradient can still overflow the step itself; report that
        // here rather than letting the broken parameters reach aggregation.
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(0));
        }
    }
    Ok(w)
}

/// Update-based intra-cluster aggregation:
/// `y^ = y + (sum_i m^_i theta_i) * (sum_i m^_i Delta_i)`.
pub fn intra_aggregate_async(
    y_t: &[f64],
    updates: &[Vec<f64>],
    weights: &[f64],
    thetas: &[usize],
) -> Vec<f64> {
    assert_eq!(updates.len(), weights.len());
    assert_eq!(thetas.len(), weights.len());
    let theta_bar: f64 = weights
        .iter()
        .zip(thetas)
        .map(|(&m, &t)| m * t as f64)
        .sum();
    let mut mixed = vec![0.0; y_t.len()];
    for (delta, &m) in updates.iter().zip(weights) {
        for (acc, d) in mixed.iter_mut().zip(delta) {
            *acc += m * d;
        }
    }
    y_t.iter()
        .zip(&mixed)
        .map(|(y, d)| y + theta_bar * d)
        .collect()
}

/// Staleness-weighted gossip for one event: every cluster j in the
/// trigger's closed neighborhood is replaced by
/// `sum_{j'} p^(j',j) * c_{j'}`, where the trigger contributes its freshly
/// aggregated `y^` and each neighbor contributes its current model.
/// Clusters outside the neighborhood keep their models bit-for-bit.
pub fn inter_aggregate_async(
    y: &mut DenseMatrix,
    hat_y: &[f64],
    mixing: &StalenessMixing,
    graph: &ServerGraph,
) {
    let trigger = mixing.trigger;
    let mut hood = graph.neighbors(trigger);
    hood.push(trigger);
    hood.sort_unstable();

    let contributions: Vec<Vec<f64>> = hood
        .iter()
        .map(|&j| {
            if j == trigger {
                hat_y.to_vec()
            } else {
                y.col(j)
            }
        })
        .collect();
    for &j in &hood {
        let mut new_col = vec![0.0; y.rows()];
        for (&j_prime, contrib) in hood.iter().zip(&contributions) {
            let p = mixing.p_t[(j_prime, j)];
            for (acc, c) in new_col.iter_mut().zip(contrib) {
                *acc += p * c;
            }
        }
        y.set_col(j, &new_col);
    }
}

/// Per-client local update counts from speeds, deadlines, and the clamp.
fn compute_thetas(
    cfg: &AsyncConfig,
    inputs: &RunInputs,
    speeds: &[f64],
) -> Result<Vec<usize>> {
    let beta_c = cfg
        .beta_c
        .unwrap_or(inputs.latency.c_cpu / inputs.latency.n_mac);
    if !(beta_c > 0.0) || !beta_c.is_finite() {
        return Err(Error::Config(format!("beta_c = {beta_c} must be positive")));
    }
    let mut thetas = Vec::with_capacity(inputs.partition.num_clients());
    for i in 0..inputs.partition.num_clients() {
        let deadline = cfg.deadlines[inputs.partition.cluster_of(i)];
        let raw = speeds[i] * beta_c * deadline;
        let rounded = raw.round() as i64;
        let clamped = rounded.clamp(cfg.theta_min as i64, cfg.theta_max as i64) as usize;
        if rounded < cfg.theta_min as i64 || rounded > cfg.theta_max as i64 {
            log::warn!(
                "client {i}: local update count {rounded} clamped to {clamped} \
                 (range {}..={})",
                cfg.theta_min,
                cfg.theta_max
            );
        }
        thetas.push(clamped);
    }
    Ok(thetas)
}

fn validate(cfg: &AsyncConfig, inputs: &RunInputs) -> Result<Vec<f64>> {
    if cfg.total_events == 0 {
        return Err(Error::Config("event budget must be positive".into()));
    }
    if !(cfg.eta > 0.0) || !cfg.eta.is_finite() {
        return Err(Error::Config(format!("eta = {} must be positive", cfg.eta)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if cfg.theta_min == 0 || cfg.theta_min > cfg.theta_max {
        return Err(Error::Config(format!(
            "need 1 <= theta_min <= theta_max, got {}..={}",
            cfg.theta_min, cfg.theta_max
        )));
    }
    inputs.latency.validate()?;
    let servers = inputs.partition.num_servers();
    if servers != inputs.graph.len() {
        return Err(Error::Config(format!(
            "partition has {servers} clusters but the graph has {} servers",
            inputs.graph.len()
        )));
    }
    if cfg.deadlines.len() != servers {
        return Err(Error::Config(format!(
            "{} deadlines for {servers} clusters",
            cfg.deadlines.len()
        )));
    }
    if cfg.deadlines.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::Config("deadlines must be positive".into()));
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
    let clients = inputs.partition.num_clients();
    let speeds = if inputs.client_speeds.is_empty() {
        vec![1.0; clients]
    } else {
        if inputs.client_speeds.len() != clients {
            return Err(Error::Config(format!(
                "{} client speeds for {clients} clients",
                inputs.client_speeds.len()
            )));
        }
        if inputs.client_speeds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("client speeds must be positive".into()));
        }
        inputs.client_speeds.to_vec()
    };
    Ok(speeds)
}

/// Runs the event-driven protocol and returns its trace.
pub fn run_async(cfg: &AsyncConfig, inputs: &RunInputs) -> Result<RunTrace> {
    let speeds = validate(cfg, inputs)?;
    let thetas = compute_thetas(cfg, inputs, &speeds)?;
    let servers = inputs.partition.num_servers();
    let clients = inputs.partition.num_clients();
    let spec = inputs.spec;
    let ds = inputs.dataset;

    let iter_times: Vec<f64> = cfg
        .deadlines
        .iter()
        .map(|&d| async_iter_time(inputs.latency, d))
        .collect();
    let worst_gap = gap_ceiling(&iter_times);

    let cluster_members: Vec<Vec<usize>> = (0..servers)
        .map(|d| inputs.partition.clients_in(d))
        .collect();
    let cluster_weights: Vec<Vec<f64>> = cluster_members
        .iter()
        .map(|members| members.iter().map(|&i| inputs.partition.m_hat()[i]).collect())
        .collect();

    let w0 = spec.init(cfg.seed);
    let mut y = DenseMatrix::from_fn(w0.len(), servers, |r, _| w0[r]);
    let mut base = y.clone();
    let mut step_base = vec![0u64; clients];
    let mut completions = vec![0usize; servers];
    let mut t_formed = 0usize; // global event counter t
    let mut t_prime = vec![0usize; servers];
    let mut peak_gap = 0usize;

    let all_indices: Vec<usize> = (0..ds.len()).collect();
    let eval_indices: Option<Vec<usize>> = inputs.eval.map(|e| (0..e.len()).collect());
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    if cfg.record_models {
        snapshots.push(y.clone());
    }
    let log_event = |rows: &mut Vec<TraceRow>,
                         t: usize,
                         wall: f64,
                         y: &DenseMatrix,
                         event: EventKind,
                         trigger: Option<usize>,
                         max_gap: Option<usize>,
                         theta_bar: Option<f64>|
     -> Result<()> {
        let u = y.mul_vec(inputs.partition.m_tilde())?;
        let loss = spec.loss(&u, ds, &all_indices);
        let acc = match (&inputs.eval, &eval_indices) {
            (Some(eval), Some(idx)) => Some(spec.accuracy(&u, eval, idx)),
            _ => None,
        };
        rows.push(TraceRow {
            k: t,
            wall_clock_s: wall,
            global_loss: loss,
            test_acc: acc,
            max_cluster_deviation: max_pairwise_distance(y),
            event,
            trigger_cluster: trigger,
            max_gap,
            theta_bar,
        });
        Ok(())
    };
    log_event(&mut rows, 0, 0.0, &y, EventKind::Start, None, None, None)?;

    let mut clock = 0.0;
    while t_formed < cfg.total_events {
        // Earliest pending completion; exact products keep ties exact.
        let next_time = (0..servers)
            .map(|d| (completions[d] + 1) as f64 * iter_times[d])
            .fold(f64::INFINITY, f64::min);
        let batch: Vec<usize> = (0..servers)
            .filter(|&d| (completions[d] + 1) as f64 * iter_times[d] == next_time)
            .collect();
        clock = next_time;

        let t_pre = t_formed;
        let t_prime_pre = t_prime.clone();
        for j in 0..servers {
            let gap = t_pre - t_prime_pre[j];
            peak_gap = peak_gap.max(gap);
            assert!(
                gap <= worst_gap,
                "cluster {j} gap {gap} exceeds the bound {worst_gap}"
            );
        }

        let mut rebroadcast = Vec::new();
        for &d in &batch {
            if t_formed == cfg.total_events {
                break;
            }
            t_formed += 1;

            let mut gaps = vec![0usize; servers];
            for j in inputs.graph.neighbors(d) {
                gaps[j] = t_pre - t_prime_pre[j];
            }

            let members = &cluster_members[d];
            let weights = &cluster_weights[d];
            let member_thetas: Vec<usize> = members.iter().map(|&i| thetas[i]).collect();
            let base_d = base.col(d);
            // Spot-check the normalization identity theta * Delta = w_theta
            // - base on roughly 1% of events, the first one included.
            let spot = t_formed % 100 == 1;
            let mut updates = Vec::with_capacity(members.len());
            for (&i, &theta) in members.iter().zip(&member_thetas) {
                let delta = local_update_async(
                    spec,
                    ds,
                    inputs.partition.shard(i),
                    &base_d,
                    theta,
                    cfg.eta,
                    cfg.batch_size,
                    cfg.seed,
                    i as u64,
                    step_base[i],
                )
                .map_err(|e| match e {
                    Error::Diverged(_) => Error::Diverged(t_formed),
                    other => other,
                })?;
                if spot {
                    let endpoint = local_endpoint(
                        spec,
                        ds,
                        inputs.partition.shard(i),
                        &base_d,
                        theta,
                        cfg.eta,
                        cfg.batch_size,
                        cfg.seed,
                        i as u64,
                        step_base[i],
                    )?;
                    for ((d_j, e_j), b_j) in delta.iter().zip(&endpoint).zip(&base_d) {
                        let raw = e_j - b_j;
                        assert!(
                            (d_j * theta as f64 - raw).abs() <= 1e-12 * (1.0 + raw.abs()),
                            "normalization identity broken for client {i} at event {t_formed}"
                        );
                    }
                }
                step_base[i] += theta as u64;
                updates.push(delta);
            }
            let hat_y = intra_aggregate_async(&y.col(d), &updates, weights, &member_thetas);
            let theta_bar: f64 = weights
                .iter()
                .zip(&member_thetas)
                .map(|(&m, &t)| m * t as f64)
                .sum();

            let mixing = build_staleness_mixing(inputs.graph, d, &gaps, cfg.psi)?;
            inter_aggregate_async(&mut y, &hat_y, &mixing, inputs.graph);

            completions[d] += 1;
            rebroadcast.push(d);

            let hood_gap = inputs
                .graph
                .neighbors(d)
                .iter()
                .map(|&j| gaps[j])
                .max()
                .unwrap_or(0);
            log_event(
                &mut rows,
                t_formed,
                clock,
                &y,
                EventKind::Async,
                Some(d),
                Some(hood_gap),
                Some(theta_bar),
            )?;
            if cfg.record_models {
                snapshots.push(y.clone());
            }
        }
        // The instant settles before anyone re-broadcasts or is marked
        // current, so simultaneous completions see each other's mixed
        // models only through their own next base and never count toward
        // each other's staleness.
        for d in rebroadcast {
            let col = y.col(d);
            base.set_col(d, &col);
            t_prime[d] = t_formed;
        }
    }

    let mix = build_mixing(inputs.graph)?;
    let mut rounds = 0;
    while max_pairwise_distance(&y) > 1e-9 && rounds < 200 {
        y = consensus_round(&y, &mix)?;
        rounds += 1;
    }
    let global = weighted_mean(&y, inputs.partition.m_tilde())?;
    log_event(&mut rows, t_formed, clock, &y, EventKind::Final, None, None, None)?;
    Ok(RunTrace {
        rows,
        final_params: global,
        model_snapshots: snapshots,
        total_time_s: clock,
        peak_gap: Some(peak_gap),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_clusters, partition_iid, synth_dataset, Partition};
    use crate::latency::LatencyParams;
    use crate::sync_engine::{run_sdfeel, SyncConfig};

    struct Fixture {
        dataset: Dataset,
        partition: Partition,
        graph: ServerGraph,
        spec: ModelSpec,
        latency: LatencyParams,
    }

    fn uniform_fixture(clients: usize, servers: usize, per_class: usize, full: bool) -> Fixture {
        let dataset = synth_dataset(4, per_class, 3, 50).unwrap();
        assert_eq!(dataset.len() % clients, 0);
        let shards = partition_iid(&dataset, clients, 7).unwrap();
        let map = assign_clusters(clients, servers, 0, 3).unwrap();
        let partition = Partition::new(shards, map, servers, dataset.len()).unwrap();
        let graph = if full {
            ServerGraph::full(servers, partition.m_tilde()).unwrap()
        } else {
            ServerGraph::ring(servers, partition.m_tilde()).unwrap()
        };
        let spec = ModelSpec::softmax_for(&dataset);
        Fixture {
            dataset,
            partition,
            graph,
            spec,
            latency: LatencyParams::mnist_defaults(),
        }
    }

    fn inputs(f: &Fixture) -> RunInputs<'_> {
        RunInputs {
            dataset: &f.dataset,
            partition: &f.partition,
            graph: &f.graph,
            spec: &f.spec,
            eval: None,
            latency: &f.latency,
            client_speeds: &[],
        }
    }

    fn base_cfg(f: &Fixture, total_events: usize, deadline_mult: &[f64]) -> AsyncConfig {
        let comp = f.latency.comp_time(1.0);
        AsyncConfig {
            total_events,
            eta: 0.05,
            batch_size: 4,
            seed: 11,
            psi: Psi::default(),
            deadlines: deadline_mult.iter().map(|&m| m * comp).collect(),
            theta_min: 1,
            theta_max: 100,
            beta_c: None,
            record_models: true,
        }
    }

    #[test]
    fn delta_max_matches_hand_values() {
        struct Case {
            times: Vec<f64>,
            want: usize,
        }
        let cases = [
            Case { times: vec![2.0, 2.0, 2.0], want: 0 },
            Case { times: vec![1.0, 2.0, 3.0], want: 3 },
            Case { times: vec![1.0, 1.0, 10.0], want: 18 },
            Case { times: vec![1.0, 1.5, 4.0], want: 5 },
        ];
        for case in cases {
            assert_eq!(
                delta_max(&case.times),
                case.want,
                "iteration times {:?}",
                case.times
            );
        }
    }

    #[test]
    fn normalized_update_identities() {
        let ds = synth_dataset(3, 8, 2, 9).unwrap();
        let spec = ModelSpec::softmax_for(&ds);
        let shard: Vec<usize> = (0..10).collect();
        let base = spec.init(4);

        // theta = 1: exactly minus eta times the first gradient.
        let delta = local_update_async(&spec, &ds, &shard, &base, 1, 0.1, 4, 7, 2, 0).unwrap();
        let batch = sample_batch(&shard, 4, 7, 2, 1);
        let g = spec.grad(&base, &ds, &batch);
        for (d, gi) in delta.iter().zip(&g) {
            assert!((d + 0.1 * gi).abs() < 1e-15, "delta {d} vs -eta*g {}", -0.1 * gi);
        }

        // eta = 0 moves nothing. (eta = 0 is rejected by run configs but the
        // primitive itself is defined for it.)
        let delta = local_update_async(&spec, &ds, &shard, &base, 3, 0.0, 4, 7, 2, 0).unwrap();
        assert!(delta.iter().all(|&d| d == 0.0));

        // theta * Delta reproduces the raw displacement.
        let theta = 4;
        let delta = local_update_async(&spec, &ds, &shard, &base, theta, 0.1, 4, 7, 2, 0).unwrap();
        let mut w = base.clone();
        for s in 1..=theta {
            let batch = sample_batch(&shard, 4, 7, 2, s as u64);
            let g = spec.grad(&w, &ds, &batch);
            for (w_j, g_j) in w.iter_mut().zip(&g) {
                *w_j -= 0.1 * g_j;
            }
        }
        for (j, (d, (wt, b))) in delta.iter().zip(w.iter().zip(&base)).enumerate() {
            let raw = wt - b;
            assert!(
                (d * theta as f64 - raw).abs() < 1e-12,
                "coordinate {j}: theta * delta = {}, displacement {raw}",
                d * theta as f64
            );
        }
    }

    #[test]
    fn equal_thetas_reduce_to_weighted_model_averaging() {
        let ds = synth_dataset(3, 8, 2, 9).unwrap();
        let spec = ModelSpec::softmax_for(&ds);
        let base = spec.init(4);
        let theta = 3;
        let shards: Vec<Vec<usize>> = vec![(0..8).collect(), (8..16).collect(), (16..24).collect()];
        let weights = [0.25, 0.5, 0.25];

        let mut updates = Vec::new();
        let mut endpoints = Vec::new();
        for (c, shard) in shards.iter().enumerate() {
            let delta =
                local_update_async(&spec, &ds, shard, &base, theta, 0.1, 4, 7, c as u64, 0)
                    .unwrap();
            let mut w = base.clone();
            for (w_j, d_j) in w.iter_mut().zip(&delta) {
                *w_j += theta as f64 * d_j;
            }
            updates.push(delta);
            endpoints.push(w);
        }
        let hat = intra_aggregate_async(&base, &updates, &weights, &[theta, theta, theta]);
        for j in 0..base.len() {
            let avg: f64 = endpoints
                .iter()
                .zip(&weights)
                .map(|(w, &m)| m * w[j])
                .sum();
            assert!(
                (hat[j] - avg).abs() < 1e-12,
                "coordinate {j}: update form {} vs model average {avg}",
                hat[j]
            );
        }
    }

    #[test]
    fn intra_aggregate_matches_hand_computation() {
        let y = vec![1.0, -2.0];
        let updates = vec![vec![0.2, 0.4], vec![-0.1, 0.3]];
        let weights = [0.5, 0.5];
        let thetas = [1usize, 3];
        // theta-bar = 2; mixed update = (0.05, 0.35).
        let hat = intra_aggregate_async(&y, &updates, &weights, &thetas);
        assert!((hat[0] - 1.1).abs() < 1e-15, "first coordinate {}", hat[0]);
        assert!((hat[1] - (-1.3)).abs() < 1e-15, "second coordinate {}", hat[1]);

        let zeros = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let hat = intra_aggregate_async(&y, &zeros, &weights, &thetas);
        assert_eq!(hat, y, "zero updates leave the model in place");
    }

    #[test]
    fn staleness_gossip_touches_only_the_neighborhood() {
        let w = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        let graph = ServerGraph::from_edges(3, &[(0, 1), (1, 2)], &w).unwrap();
        let psi = Psi::default();
        let mixing = build_staleness_mixing(&graph, 0, &[0, 2, 0], psi).unwrap();
        let mut y = DenseMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let before = y.clone();
        let hat = vec![10.0, 20.0];
        inter_aggregate_async(&mut y, &hat, &mixing, &graph);

        let p01 = psi.eval(2) / (psi.eval(0) + psi.eval(2));
        let p00 = 1.0 - p01;
        for r in 0..2 {
            let want0 = p00 * hat[r] + p01 * before[(r, 1)];
            let want1 = p01 * hat[r] + (1.0 - p01) * before[(r, 1)];
            assert!((y[(r, 0)] - want0).abs() < 1e-12, "trigger column row {r}");
            assert!((y[(r, 1)] - want1).abs() < 1e-12, "neighbor column row {r}");
            assert_eq!(y[(r, 2)], before[(r, 2)], "non-neighbor must be untouched");
        }
    }

    #[test]
    fn uniform_weights_preserve_the_cluster_mean() {
        let d = 4;
        let w = ServerGraph::uniform_weights(d);
        let graph = ServerGraph::random_connected(d, 2, &w, 5).unwrap();
        for trigger in 0..d {
            let mixing =
                build_staleness_mixing(&graph, trigger, &[1, 0, 2, 3], Psi::default()).unwrap();
            let mut y = DenseMatrix::from_fn(3, d, |i, j| ((i * 5 + j * 7) % 11) as f64);
            let hat = vec![0.5, -1.5, 2.0];
            // The conserved quantity is the mean of the contributions.
            let mut want = vec![0.0; 3];
            for j in 0..d {
                let contrib = if j == trigger { hat.clone() } else { y.col(j) };
                for (acc, c) in want.iter_mut().zip(&contrib) {
                    *acc += c / d as f64;
                }
            }
            inter_aggregate_async(&mut y, &hat, &mixing, &graph);
            let got = y.mul_vec(&w).unwrap();
            for (g, w_) in got.iter().zip(&want) {
                assert!((g - w_).abs() < 1e-12, "mean moved: {g} vs {w_}");
            }
        }
    }

    #[test]
    fn identical_deadlines_degenerate_to_the_synchronous_protocol() {
        let f = uniform_fixture(4, 2, 18, true);
        let theta = 3;
        let mut cfg = base_cfg(&f, 8, &[theta as f64, theta as f64]);
        cfg.psi = Psi::Constant(1.0);
        let trace = run_async(&cfg, &inputs(&f)).unwrap();

        let sync_cfg = SyncConfig {
            k: 4 * theta,
            tau1: theta,
            tau2: 1,
            alpha: 1,
            eta: cfg.eta,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            record_models: true,
        };
        let sync = run_sdfeel(&sync_cfg, &inputs(&f)).unwrap();

        // Async snapshots: start + one per event; each instant completes
        // both clusters, so snapshots 2, 4, 6, 8 are the settled states
        // matching sync iterations 3, 6, 9, 12.
        let mut worst = 0.0f64;
        for round in 1..=4usize {
            let settled = &trace.model_snapshots[2 * round];
            let sync_w = &sync.model_snapshots[theta * round];
            for d in 0..2 {
                let y_d = settled.col(d);
                let member = f.partition.clients_in(d)[0];
                let w_d = sync_w.col(member);
                for (a, b) in y_d.iter().zip(&w_d) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(
            worst < 1e-9,
            "equal deadlines must reproduce the synchronous rounds, diff {worst}"
        );
    }

    #[test]
    fn simultaneous_completions_are_ordered_and_deterministic() {
        let f = uniform_fixture(6, 3, 18, false);
        let cfg = base_cfg(&f, 9, &[2.0, 2.0, 2.0]);
        let a = run_async(&cfg, &inputs(&f)).unwrap();
        let b = run_async(&cfg, &inputs(&f)).unwrap();
        assert_eq!(a.final_params, b.final_params);
        let triggers: Vec<usize> = a.rows[1..=9]
            .iter()
            .map(|r| r.trigger_cluster.unwrap())
            .collect();
        assert_eq!(
            triggers,
            vec![0, 1, 2, 0, 1, 2, 0, 1, 2],
            "equal deadlines must fire in ascending cluster order"
        );
        assert_eq!(
            a.peak_gap,
            Some(0),
            "simultaneous completions carry no staleness"
        );
    }

    #[test]
    fn one_two_three_deadlines_reach_the_gap_bound() {
        let mut f = uniform_fixture(6, 3, 18, false);
        // Raise the channel rates so both transfer terms are exactly 0.25s;
        // the default rates would not leave room for a 1s iteration.
        f.latency.r_ct_sr = 1.28e8;
        f.latency.r_sr_sr = 1.28e8;
        let comm = f.latency.t_ct_sr() + f.latency.t_sr_sr();
        assert_eq!(comm, 0.5);
        let mut cfg = base_cfg(&f, 30, &[1.0, 1.0, 1.0]);
        cfg.beta_c = Some(2.0);
        // Deadlines chosen so the full iteration times are exactly 1, 2, 3.
        cfg.deadlines = vec![1.0 - comm, 2.0 - comm, 3.0 - comm];
        let trace = run_async(&cfg, &inputs(&f)).unwrap();
        let iter_times: Vec<f64> = cfg
            .deadlines
            .iter()
            .map(|&d| async_iter_time(&f.latency, d))
            .collect();
        assert_eq!(iter_times, vec![1.0, 2.0, 3.0], "exact iteration times");
        let bound = delta_max(&iter_times);
        assert_eq!(bound, 3);
        assert_eq!(trace.peak_gap, Some(bound), "the (1,2,3) fleet attains its bound");
    }

    #[test]
    fn theta_derivation_rounds_and_clamps() {
        let f = uniform_fixture(4, 2, 18, false);
        let comp = f.latency.comp_time(1.0);
        let cfg = AsyncConfig {
            total_events: 1,
            eta: 0.05,
            batch_size: 4,
            seed: 1,
            psi: Psi::default(),
            deadlines: vec![2.6 * comp, 40.0 * comp],
            theta_min: 2,
            theta_max: 5,
            beta_c: None,
            record_models: false,
        };
        let speeds = vec![1.0; 4];
        let thetas = compute_thetas(&cfg, &inputs(&f), &speeds).unwrap();
        for i in 0..4 {
            let want = match f.partition.cluster_of(i) {
                0 => 3, // round(2.6)
                _ => 5, // round(40) clamped to theta_max
            };
            assert_eq!(thetas[i], want, "client {i}");
        }
    }

    #[test]
    fn wall_clock_advances_by_iteration_times() {
        let f = uniform_fixture(6, 3, 18, false);
        let cfg = base_cfg(&f, 12, &[1.0, 2.0, 4.0]);
        let trace = run_async(&cfg, &inputs(&f)).unwrap();
        let mut last = 0.0;
        for row in &trace.rows {
            assert!(row.wall_clock_s >= last, "clock went backwards");
            last = row.wall_clock_s;
        }
        assert_eq!(trace.total_time_s, last);
        assert!(trace.rows.len() == 12 + 2, "start + events + final");
    }

    #[test]
    fn divergence_reports_the_event_index() {
        // Gradients stay finite under any merely huge step (saturation bounds
        // them), so overflow a parameter past f64::MAX instead: huge features
        // with alternating signs make the first nonzero update infinite and
        // the following forward pass NaN.
        let mut f = uniform_fixture(4, 2, 18, false);
        let dim = f.dataset.feature_dim();
        let labels: Vec<usize> = (0..f.dataset.len()).map(|i| f.dataset.label(i)).collect();
        let features: Vec<f64> = (0..f.dataset.len())
            .flat_map(|_| (0..dim).map(|j| if j % 2 == 0 { 1e6 } else { -1e6 }))
            .collect();
        f.dataset = Dataset::new(features, dim, labels).unwrap();
        let mut cfg = base_cfg(&f, 6, &[1.0, 1.0]);
        cfg.eta = 1e307;
        match run_async(&cfg, &inputs(&f)) {
            Err(Error::Diverged(t)) => assert!(t >= 1 && t <= 6, "diverged at event {t}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
