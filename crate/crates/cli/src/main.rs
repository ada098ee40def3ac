//! Command-line driver for the simulator.
//!
//! ```text
//! sdfeel run <config.toml>        run every (scheme, seed) pair, write CSVs
//! sdfeel topology --kind ring --servers 6
//!                                 print the mixing matrix and spectral gap
//! sdfeel bounds <config.toml>     tabulate bound values over a tau grid
//! sdfeel partition <config.toml>  per-client label histograms
//! sdfeel oracle-check --k 12 --tau1 2 --tau2 3
//!                                 event engine vs matrix oracle, nonzero on
//!                                 mismatch
//! ```
//!
//! Configuration problems (including unknown flags) exit with status 2; run
//! and check failures exit with status 1.

use anyhow::Context;
use clap::{Parser, Subcommand};
use sdfeel_core::data::{assign_clusters, partition_iid, synth_dataset, Partition};
use sdfeel_core::sync_engine::{matrix_oracle, run_sdfeel, RunInputs, SyncConfig};
use sdfeel_core::theory::{eval_sync_bound, BoundInputs};
use sdfeel_core::topology::{build_mixing, ServerGraph};
use sdfeel_core::{
    build_world, run_experiment, ExperimentConfig, LatencyParams, ModelSpec,
};
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sdfeel",
    version,
    about = "Deterministic simulator for semi-decentralized federated edge learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (scheme, seed) pair of a config and write trace CSVs.
    Run {
        /// Experiment config, TOML.
        config: PathBuf,
    },
    /// Print the mixing matrix and its spectral gap for a topology.
    Topology {
        /// ring, star, full, partial, or random.
        #[arg(long)]
        kind: String,
        /// Number of edge servers.
        #[arg(long)]
        servers: usize,
        /// Edges beyond a random spanning tree (random only).
        #[arg(long, default_value_t = 0)]
        extra_edges: usize,
        /// Seed for randomized topologies.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Tabulate bound values over a tau1 x tau2 grid as CSV.
    Bounds {
        /// Experiment config, TOML; needs a [bounds] block.
        config: PathBuf,
        /// Output CSV path.
        #[arg(long, default_value = "bounds.csv")]
        output: PathBuf,
        /// Upper limit of the tau1 and tau2 grid.
        #[arg(long, default_value_t = 20)]
        grid: usize,
    },
    /// Report per-client label histograms for a partition.
    Partition {
        /// Experiment config, TOML.
        config: PathBuf,
        /// Run seed for the partition draw.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Cross-check the event-level engine against the matrix-form oracle.
    OracleCheck {
        /// Total local iterations; must be a multiple of tau1 * tau2.
        #[arg(long, default_value_t = 24)]
        k: usize,
        /// Iterations per intra-cluster aggregation.
        #[arg(long, default_value_t = 2)]
        tau1: usize,
        /// Intra-cluster rounds per inter-cluster round.
        #[arg(long, default_value_t = 3)]
        tau2: usize,
        /// Gossip rounds per inter-cluster aggregation.
        #[arg(long, default_value_t = 2)]
        alpha: usize,
        /// Edge servers in the check instance.
        #[arg(long, default_value_t = 3)]
        servers: usize,
        /// Clients in the check instance.
        #[arg(long, default_value_t = 6)]
        clients: usize,
        /// Seed for data, partition, and run.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Agreement tolerance on every client model at every iteration.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_problem = err
                .downcast_ref::<sdfeel_core::Error>()
                .is_some_and(|e| matches!(e, sdfeel_core::Error::Config(_)));
            std::process::exit(if config_problem { 2 } else { 1 });
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let out = run_experiment(&cfg)?;
            for path in &out.trace_paths {
                println!("wrote {}", path.display());
            }
            println!("wrote {}", out.summary_path.display());
            Ok(0)
        }
        Command::Topology {
            kind,
            servers,
            extra_edges,
            seed,
        } => {
            let graph = graph_for(&kind, servers, extra_edges, seed)?;
            let mix = build_mixing(&graph)?;
            println!("kind = {kind}, servers = {servers}");
            println!("P =");
            for i in 0..servers {
                let row: Vec<String> = (0..servers)
                    .map(|j| format!("{:9.6}", mix.p[(i, j)]))
                    .collect();
                println!("  {}", row.join(" "));
            }
            println!("zeta = {:.6}", mix.zeta);
            Ok(0)
        }
        Command::Bounds {
            config,
            output,
            grid,
        } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let Some(bounds) = cfg.bounds.clone() else {
                return Err(sdfeel_core::Error::Config(
                    "bounds: a [bounds] block is required for this subcommand".into(),
                )
                .into());
            };
            let graph = graph_for(&cfg.topology.kind, cfg.topology.servers, cfg.topology.extra_edges, 1)?;
            let zeta = build_mixing(&graph)?.zeta;
            let clients = cfg.partition.clients;
            let mut csv = String::from(
                "tau1,tau2,lambda,v1,v2,v3,phi0,phi,theorem1_rhs,lr_feasible\n",
            );
            for tau1 in 1..=grid {
                for tau2 in 1..=grid {
                    let inputs = BoundInputs {
                        l: bounds.l,
                        sigma2: bounds.sigma2,
                        kappa2: bounds.kappa2,
                        eta: cfg.sync.eta,
                        tau1,
                        tau2,
                        alpha: cfg.sync.alpha,
                        zeta,
                        weights: vec![1.0 / clients as f64; clients],
                        delta: bounds.delta,
                        k: cfg.sync.k,
                    };
                    let out = eval_sync_bound(&inputs)?;
                    let cell = |v: Option<f64>| {
                        v.map(|x| format!("{x}")).unwrap_or_else(|| "nan".into())
                    };
                    csv.push_str(&format!(
                        "{tau1},{tau2},{},{},{},{},{},{},{},{}\n",
                        cell(out.lambda),
                        cell(out.v1),
                        cell(out.v2),
                        cell(out.v3),
                        cell(out.phi0),
                        cell(out.phi),
                        cell(out.theorem1_rhs),
                        out.lr_feasible,
                    ));
                }
            }
            std::fs::write(&output, csv)
                .with_context(|| format!("writing {}", output.display()))?;
            println!("wrote {}", output.display());
            Ok(0)
        }
        Command::Partition { config, seed } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let world = build_world(&cfg, seed)?;
            let classes = world.dataset.num_classes();
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            writeln!(out, "clients = {}, classes = {classes}", world.partition.num_clients())?;
            for i in 0..world.partition.num_clients() {
                let mut hist = vec![0usize; classes];
                for &idx in world.partition.shard(i) {
                    hist[world.dataset.label(idx)] += 1;
                }
                let cells: Vec<String> = hist.iter().map(|c| c.to_string()).collect();
                writeln!(
                    out,
                    "client {i} cluster {}: [{}] ({} samples)",
                    world.partition.cluster_of(i),
                    cells.join(", "),
                    world.partition.shard(i).len()
                )?;
            }
            Ok(0)
        }
        Command::OracleCheck {
            k,
            tau1,
            tau2,
            alpha,
            servers,
            clients,
            seed,
            tol,
        } => {
            // Equal shards keep the check instance's weights uniform.
            let dataset = synth_dataset(4, 3 * clients, 3, 50)?;
            let shards = partition_iid(&dataset, clients, seed)?;
            let map = assign_clusters(clients, servers, 0, seed)?;
            let partition = Partition::new(shards, map, servers, dataset.len())?;
            let graph = ServerGraph::ring(servers, partition.m_tilde())?;
            let spec = ModelSpec::softmax_for(&dataset);
            let latency = LatencyParams::mnist_defaults();
            let inputs = RunInputs {
                dataset: &dataset,
                partition: &partition,
                graph: &graph,
                spec: &spec,
                eval: None,
                latency: &latency,
                client_speeds: &[],
            };
            let cfg = SyncConfig {
                k,
                tau1,
                tau2,
                alpha,
                eta: 0.05,
                batch_size: 4,
                seed,
                record_models: true,
            };
            let engine = run_sdfeel(&cfg, &inputs)?;
            let oracle = matrix_oracle(&cfg, &inputs)?;
            let mut worst = 0.0f64;
            for (we, wo) in engine.model_snapshots.iter().zip(&oracle.model_snapshots) {
                worst = worst.max(we.max_abs_diff(wo));
            }
            println!(
                "max abs diff = {worst:e} over {} snapshots (tolerance {tol:e})",
                engine.model_snapshots.len()
            );
            if worst < tol {
                Ok(0)
            } else {
                eprintln!("event-level engine and matrix oracle disagree");
                Ok(1)
            }
        }
    }
}

fn graph_for(kind: &str, servers: usize, extra_edges: usize, seed: u64) -> anyhow::Result<ServerGraph> {
    let weights = ServerGraph::uniform_weights(servers);
    let graph = match kind {
        "ring" => ServerGraph::ring(servers, &weights)?,
        "star" => ServerGraph::star(servers, &weights)?,
        "full" => ServerGraph::full(servers, &weights)?,
        "partial" => ServerGraph::partial(servers, &weights)?,
        "random" => ServerGraph::random_connected(servers, extra_edges, &weights, seed)?,
        other => {
            return Err(sdfeel_core::Error::Config(format!(
                "topology.kind: unknown kind \"{other}\" (expected ring, star, full, partial, or random)"
            ))
            .into())
        }
    };
    Ok(graph)
}
