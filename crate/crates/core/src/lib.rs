//! Deterministic simulator and analysis library for semi-decentralized
//! federated edge learning (SD-FEEL).
//!
//! Client nodes attached to edge servers train a shared model with local SGD;
//! edge servers periodically aggregate their clusters and gossip with
//! neighboring servers over a connected graph, so no cloud round-trip is
//! needed. This crate simulates that protocol end to end, deterministically:
//!
//! - [`numerics`]: small dense matrices with a fixed accumulation order and a
//!   cyclic Jacobi eigensolver.
//! - [`topology`]: server graphs, the Laplacian-based mixing matrix and its
//!   spectral gap `zeta`, staleness-aware mixing, and gossip rounds.
//! - [`data`]: synthetic datasets, IDX ingestion, and non-IID partitioners
//!   (label skew, Dirichlet, iid) with the data-ratio bookkeeping.
//! - [`models`]: softmax regression and a one-hidden-layer MLP with analytic
//!   gradients and seeded batch sampling.
//! - [`sync_engine`]: the synchronous protocol, three baselines (HierFAVG,
//!   FedAvg, FEEL), and a matrix-form oracle used for cross-verification.
//! - [`async_engine`]: the asynchronous protocol driven by a virtual-clock
//!   event queue, with iteration-gap accounting.
//! - [`latency`]: the wall-clock model (compute + link transfer times).
//! - [`theory`]: numerical evaluation of the convergence-bound expressions.
//! - [`harness`] and [`config`]: experiment orchestration from a TOML config.
//!
//! Every random choice flows from a master seed through named ChaCha8 streams
//! ([`rng::stream`]); reruns with the same seed produce byte-identical traces.

use thiserror::Error;

pub mod async_engine;
pub mod config;
pub mod data;
pub mod harness;
pub mod latency;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod sync_engine;
pub mod theory;
pub mod topology;
pub mod trace;

pub use async_engine::{delta_max, run_async, AsyncConfig};
pub use config::ExperimentConfig;
pub use data::{Dataset, Partition};
pub use harness::{build_world, run_experiment, run_scheme, ExperimentOutput, World};
pub use latency::{LatencyParams, Scheme};
pub use models::{ModelSpec, ModelState};
pub use numerics::{DenseMatrix, Spectrum};
pub use sync_engine::{
    matrix_oracle, run_fedavg, run_feel, run_hierfavg, run_sdfeel, RunInputs, SyncConfig,
};
pub use theory::{
    estimate_inputs, eval_async_bound, eval_sync_bound, BoundBreakdown, BoundInputs, RhoMode,
    RhoStats,
};
pub use topology::{
    build_mixing, build_staleness_mixing, consensus_round, rho_sequence, MixingMatrix, Psi,
    ServerGraph, StalenessMixing,
};
pub use trace::{EventKind, RunTrace, TraceRow};

/// Errors produced by simulator construction and runs.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix dimensions do not admit the requested operation.
    #[error("dimension mismatch: ({0} x {1}) incompatible with ({2} x {3})")]
    DimMismatch(usize, usize, usize, usize),

    /// An operation requiring a symmetric matrix received a non-symmetric one.
    #[error("matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {delta:e}")]
    NotSymmetric { i: usize, j: usize, delta: f64 },

    /// The Jacobi eigensolver hit its sweep cap before converging.
    #[error("jacobi eigensolver did not converge within {0} sweeps")]
    JacobiStalled(usize),

    /// The edge-server graph is not connected.
    #[error("server graph is disconnected (mixing would not contract)")]
    Disconnected,

    /// A configuration value is invalid or inconsistent; the message names the
    /// offending field or quantity.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input file is not valid IDX data.
    #[error("idx parse error at byte {offset}: {message}")]
    IdxParse { offset: u64, message: String },

    /// A training run produced a non-finite loss or gradient.
    #[error("run diverged: non-finite value at iteration {0}")]
    Diverged(usize),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
