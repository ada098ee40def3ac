//! Experiment configuration: a TOML schema covering data, partition,
//! topology, model, schedule, and latency choices, with validation that
//! reports problems by field path before any run starts.
//!
//! The schema, not the serialization syntax, is the contract: every field
//! has a documented default, and the defaults describe a 50-client,
//! 10-server ring with batch size 10, learning rate 0.001, and a softmax
//! model. A minimal config can therefore be as small as
//!
//! ```text
//! schemes = ["sdfeel"]
//! seeds = [1, 2, 3]
//! output = "runs"
//! ```
//!
//! Blocks map onto the engine types: `[sync]` builds a
//! [`SyncConfig`](crate::sync_engine::SyncConfig), `[async]` an
//! [`AsyncConfig`](crate::async_engine::AsyncConfig), `[latency]` a
//! [`LatencyParams`](crate::latency::LatencyParams). The optional
//! `[bounds]` block carries analysis-side constants; when present, the
//! harness checks learning-rate feasibility before running.

use crate::async_engine::AsyncConfig;
use crate::latency::{LatencyParams, Scheme};
use crate::sync_engine::SyncConfig;
use crate::topology::Psi;
use crate::{Error, Result};
use serde::Deserialize;
use std::path::Path;

/// Dataset source and shape.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBlock {
    /// `"synth"` (Gaussian class clusters) or `"idx"` (image files).
    pub kind: String,
    /// Number of classes (synthetic data).
    pub classes: usize,
    /// Training samples per class (synthetic data).
    pub per_class: usize,
    /// Feature dimension (synthetic data).
    pub dim: usize,
    /// Dataset seed; fixed across run seeds so every run sees the same data.
    pub seed: u64,
    /// Held-out samples per class for the accuracy column; 0 disables.
    pub eval_per_class: usize,
    /// Training images, IDX format (`kind = "idx"`).
    pub images: String,
    /// Training labels, IDX format (`kind = "idx"`).
    pub labels: String,
    /// Held-out images, IDX format (optional).
    pub eval_images: String,
    /// Held-out labels, IDX format (optional).
    pub eval_labels: String,
}

impl Default for DataBlock {
    fn default() -> Self {
        DataBlock {
            kind: "synth".into(),
            classes: 10,
            per_class: 60,
            dim: 20,
            seed: 7,
            eval_per_class: 20,
            images: String::new(),
            labels: String::new(),
            eval_images: String::new(),
            eval_labels: String::new(),
        }
    }
}

/// How samples are split across clients and clients across servers.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionBlock {
    /// `"iid"`, `"label-skew"`, or `"dirichlet"`.
    pub kind: String,
    /// Number of clients.
    pub clients: usize,
    /// Distinct classes per client (`label-skew`).
    pub classes_per_client: usize,
    /// Concentration parameter (`dirichlet`).
    pub beta: f64,
    /// Cluster-size imbalance knob passed to the cluster assignment.
    pub gamma: usize,
}

impl Default for PartitionBlock {
    fn default() -> Self {
        PartitionBlock {
            kind: "label-skew".into(),
            clients: 50,
            classes_per_client: 2,
            beta: 0.5,
            gamma: 0,
        }
    }
}

/// Edge-server connectivity.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyBlock {
    /// `"ring"`, `"star"`, `"full"`, `"partial"`, or `"random"`.
    pub kind: String,
    /// Number of edge servers.
    pub servers: usize,
    /// Edges beyond a random spanning tree (`random`).
    pub extra_edges: usize,
}

impl Default for TopologyBlock {
    fn default() -> Self {
        TopologyBlock {
            kind: "ring".into(),
            servers: 10,
            extra_edges: 0,
        }
    }
}

/// Model family.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    /// `"softmax"` or `"mlp"`.
    pub kind: String,
    /// Hidden width (`mlp`).
    pub hidden: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock {
            kind: "softmax".into(),
            hidden: 32,
        }
    }
}

/// Synchronous schedule parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncBlock {
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
    /// Mini-batch size.
    pub batch: usize,
}

impl Default for SyncBlock {
    fn default() -> Self {
        SyncBlock {
            k: 240,
            tau1: 5,
            tau2: 1,
            alpha: 1,
            eta: 0.001,
            batch: 10,
        }
    }
}

/// Event-driven schedule parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsyncBlock {
    /// Total completion events to process.
    pub events: usize,
    /// SGD learning rate.
    pub eta: f64,
    /// Mini-batch size.
    pub batch: usize,
    /// Per-cluster computing deadlines in seconds; one per server.
    pub deadlines: Vec<f64>,
    /// Lower clamp for per-client local update counts.
    pub theta_min: usize,
    /// Upper clamp for per-client local update counts.
    pub theta_max: usize,
    /// Staleness weight family: `"reciprocal"` or `"constant"`.
    pub psi_kind: String,
    /// Scale (reciprocal) or constant value of the staleness weight.
    pub psi_value: f64,
    /// Speed-to-updates coefficient; 0 selects the latency-derived default.
    pub beta_c: f64,
}

impl Default for AsyncBlock {
    fn default() -> Self {
        AsyncBlock {
            events: 400,
            eta: 0.001,
            batch: 10,
            deadlines: Vec::new(),
            theta_min: 1,
            theta_max: 100,
            psi_kind: "reciprocal".into(),
            psi_value: 0.5,
            beta_c: 0.0,
        }
    }
}

/// Analysis-side constants enabling the learning-rate feasibility check.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsBlock {
    /// Smoothness constant L.
    pub l: f64,
    /// Mini-batch gradient variance bound.
    pub sigma2: f64,
    /// Squared non-IIDness bound.
    pub kappa2: f64,
    /// Initial optimality gap.
    pub delta: f64,
}

impl Default for BoundsBlock {
    fn default() -> Self {
        BoundsBlock {
            l: 1.0,
            sigma2: 1.0,
            kappa2: 1.0,
            delta: 1.0,
        }
    }
}

/// Top-level experiment description.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Schemes to run: `sdfeel`, `sdfeel-async`, `hierfavg`, `fedavg`, `feel`.
    pub schemes: Vec<String>,
    /// Master seeds; each (scheme, seed) pair is one run.
    pub seeds: Vec<u64>,
    /// Output directory for trace and summary CSVs.
    pub output: String,
    /// Loss threshold for the time-to-target summary column; 0 disables.
    pub target_loss: f64,
    /// Per-client relative speeds; empty means unit speed for everyone.
    pub speeds: Vec<f64>,
    pub data: DataBlock,
    pub partition: PartitionBlock,
    pub topology: TopologyBlock,
    pub model: ModelBlock,
    pub sync: SyncBlock,
    #[serde(rename = "async")]
    pub r#async: AsyncBlock,
    /// Workload and channel constants; defaults to the digit-classification
    /// workload.
    pub latency: Option<LatencyBlock>,
    /// Analysis constants for the learning-rate check; optional.
    pub bounds: Option<BoundsBlock>,
}

/// Latency constants block (same fields as [`LatencyParams`]).
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyBlock {
    pub n_mac: f64,
    pub c_cpu: f64,
    pub m_bit: f64,
    pub r_ct_sr: f64,
    pub r_sr_sr: f64,
    pub r_ct_cd: f64,
    pub r_sr_cd: f64,
}

impl Default for LatencyBlock {
    fn default() -> Self {
        let p = LatencyParams::mnist_defaults();
        LatencyBlock {
            n_mac: p.n_mac,
            c_cpu: p.c_cpu,
            m_bit: p.m_bit,
            r_ct_sr: p.r_ct_sr,
            r_sr_sr: p.r_sr_sr,
            r_ct_cd: p.r_ct_cd,
            r_sr_cd: p.r_sr_cd,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schemes: vec!["sdfeel".into()],
            seeds: vec![1],
            output: "runs".into(),
            target_loss: 0.0,
            speeds: Vec::new(),
            data: DataBlock::default(),
            partition: PartitionBlock::default(),
            topology: TopologyBlock::default(),
            model: ModelBlock::default(),
            sync: SyncBlock::default(),
            r#async: AsyncBlock::default(),
            latency: None,
            bounds: None,
        }
    }
}

fn bad(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    /// Parses a config from TOML text and validates it.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] with the offending key path for syntax errors,
    /// unknown fields, or semantic problems.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    ///
    /// # Errors
    ///
    /// [`Error::Io`] if the file cannot be read, otherwise as
    /// [`Self::from_toml_str`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// The parsed scheme list, in config order.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] naming the offending entry for unknown schemes.
    pub fn scheme_list(&self) -> Result<Vec<Scheme>> {
        self.schemes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse()
                    .map_err(|e| bad(&format!("schemes[{i}]"), e))
            })
            .collect()
    }

    /// Latency constants, with the digit-classification defaults when the
    /// block is absent.
    pub fn latency_params(&self) -> LatencyParams {
        let block = self.latency.clone().unwrap_or_default();
        LatencyParams {
            n_mac: block.n_mac,
            c_cpu: block.c_cpu,
            m_bit: block.m_bit,
            r_ct_sr: block.r_ct_sr,
            r_sr_sr: block.r_sr_sr,
            r_ct_cd: block.r_ct_cd,
            r_sr_cd: block.r_sr_cd,
        }
    }

    /// The staleness weight family for the event-driven scheme.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] for an unknown `psi_kind` or non-positive value.
    pub fn psi(&self) -> Result<Psi> {
        if !(self.r#async.psi_value > 0.0) {
            return Err(bad("async.psi_value", "must be positive"));
        }
        match self.r#async.psi_kind.as_str() {
            "reciprocal" => Ok(Psi::Reciprocal {
                scale: self.r#async.psi_value,
            }),
            "constant" => Ok(Psi::Constant(self.r#async.psi_value)),
            other => Err(bad(
                "async.psi_kind",
                format!("unknown kind \"{other}\" (expected reciprocal or constant)"),
            )),
        }
    }

    /// The synchronous engine config for one run seed.
    pub fn sync_config(&self, seed: u64) -> SyncConfig {
        SyncConfig {
            k: self.sync.k,
            tau1: self.sync.tau1,
            tau2: self.sync.tau2,
            alpha: self.sync.alpha,
            eta: self.sync.eta,
            batch_size: self.sync.batch,
            seed,
            record_models: false,
        }
    }

    /// The event-driven engine config for one run seed.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] if the staleness block is malformed.
    pub fn async_config(&self, seed: u64) -> Result<AsyncConfig> {
        Ok(AsyncConfig {
            total_events: self.r#async.events,
            eta: self.r#async.eta,
            batch_size: self.r#async.batch,
            seed,
            psi: self.psi()?,
            deadlines: self.r#async.deadlines.clone(),
            theta_min: self.r#async.theta_min,
            theta_max: self.r#async.theta_max,
            beta_c: (self.r#async.beta_c > 0.0).then_some(self.r#async.beta_c),
            record_models: false,
        })
    }

    /// Whether the scheme list contains the event-driven scheme.
    pub fn wants_async(&self) -> Result<bool> {
        Ok(self
            .scheme_list()?
            .iter()
            .any(|&s| s == Scheme::SdfeelAsync))
    }

    /// Whether the scheme list contains any synchronous-schedule scheme.
    pub fn wants_sync(&self) -> Result<bool> {
        Ok(self
            .scheme_list()?
            .iter()
            .any(|&s| s != Scheme::SdfeelAsync))
    }

    /// Cross-field validation; every error names the offending field path.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] on the first inconsistency found.
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(bad("schemes", "at least one scheme is required"));
        }
        let schemes = self.scheme_list()?;
        if self.seeds.is_empty() {
            return Err(bad("seeds", "at least one seed is required"));
        }
        if self.output.is_empty() {
            return Err(bad("output", "an output directory is required"));
        }
        if self.target_loss < 0.0 {
            return Err(bad("target_loss", "must be non-negative (0 disables)"));
        }

        match self.data.kind.as_str() {
            "synth" => {
                if self.data.classes < 2 {
                    return Err(bad("data.classes", "need at least two classes"));
                }
                if self.data.per_class == 0 {
                    return Err(bad("data.per_class", "need at least one sample per class"));
                }
                if self.data.dim == 0 {
                    return Err(bad("data.dim", "need at least one feature"));
                }
            }
            "idx" => {
                if self.data.images.is_empty() || self.data.labels.is_empty() {
                    return Err(bad(
                        "data.images",
                        "idx data needs both images and labels paths",
                    ));
                }
                if self.data.eval_images.is_empty() != self.data.eval_labels.is_empty() {
                    return Err(bad(
                        "data.eval_images",
                        "held-out images and labels must be supplied together",
                    ));
                }
            }
            other => {
                return Err(bad(
                    "data.kind",
                    format!("unknown kind \"{other}\" (expected synth or idx)"),
                ))
            }
        }

        let clients = self.partition.clients;
        let servers = self.topology.servers;
        match self.partition.kind.as_str() {
            "iid" => {}
            "label-skew" => {
                if self.data.kind == "synth"
                    && (self.partition.classes_per_client == 0
                        || self.partition.classes_per_client > self.data.classes)
                {
                    return Err(bad(
                        "partition.classes_per_client",
                        format!("out of range 1..={}", self.data.classes),
                    ));
                }
            }
            "dirichlet" => {
                if !(self.partition.beta > 0.0) {
                    return Err(bad("partition.beta", "must be positive"));
                }
            }
            other => {
                return Err(bad(
                    "partition.kind",
                    format!("unknown kind \"{other}\" (expected iid, label-skew, or dirichlet)"),
                ))
            }
        }
        if clients == 0 {
            return Err(bad("partition.clients", "need at least one client"));
        }
        if servers == 0 {
            return Err(bad("topology.servers", "need at least one server"));
        }
        if clients < servers {
            return Err(bad(
                "partition.clients",
                format!("need at least one client per server (servers = {servers})"),
            ));
        }

        match self.topology.kind.as_str() {
            "ring" | "star" | "full" => {}
            "partial" => {
                if servers < 4 || servers % 2 != 0 {
                    return Err(bad(
                        "topology.servers",
                        "the partial topology needs an even server count of at least 4",
                    ));
                }
            }
            "random" => {}
            other => {
                return Err(bad(
                    "topology.kind",
                    format!(
                        "unknown kind \"{other}\" (expected ring, star, full, partial, or random)"
                    ),
                ))
            }
        }

        match self.model.kind.as_str() {
            "softmax" => {}
            "mlp" => {
                if self.model.hidden == 0 {
                    return Err(bad("model.hidden", "need at least one hidden unit"));
                }
            }
            other => {
                return Err(bad(
                    "model.kind",
                    format!("unknown kind \"{other}\" (expected softmax or mlp)"),
                ))
            }
        }

        if schemes.iter().any(|&s| s != Scheme::SdfeelAsync) {
            let s = &self.sync;
            if s.tau1 == 0 || s.tau2 == 0 || s.alpha == 0 {
                return Err(bad("sync.tau1", "tau1, tau2, and alpha must be positive"));
            }
            if s.k == 0 || s.k % (s.tau1 * s.tau2) != 0 {
                return Err(bad(
                    "sync.k",
                    format!("must be a positive multiple of tau1 * tau2 = {}", s.tau1 * s.tau2),
                ));
            }
            if !(s.eta > 0.0) {
                return Err(bad("sync.eta", "must be positive"));
            }
            if s.batch == 0 {
                return Err(bad("sync.batch", "must be positive"));
            }
        }

        if schemes.iter().any(|&s| s == Scheme::SdfeelAsync) {
            let a = &self.r#async;
            if a.events == 0 {
                return Err(bad("async.events", "need at least one event"));
            }
            if !(a.eta > 0.0) {
                return Err(bad("async.eta", "must be positive"));
            }
            if a.batch == 0 {
                return Err(bad("async.batch", "must be positive"));
            }
            if a.deadlines.len() != servers {
                return Err(bad(
                    "async.deadlines",
                    format!(
                        "expected one deadline per server ({} != {servers})",
                        a.deadlines.len()
                    ),
                ));
            }
            if a.deadlines.iter().any(|&d| !(d > 0.0)) {
                return Err(bad("async.deadlines", "deadlines must be positive"));
            }
            if a.theta_min == 0 || a.theta_min > a.theta_max {
                return Err(bad(
                    "async.theta_min",
                    format!("need 1 <= theta_min <= theta_max, got {}..={}", a.theta_min, a.theta_max),
                ));
            }
            self.psi()?;
        }

        if !self.speeds.is_empty() {
            if self.speeds.len() != clients {
                return Err(bad(
                    "speeds",
                    format!("expected one speed per client ({} != {clients})", self.speeds.len()),
                ));
            }
            if self.speeds.iter().any(|&v| !(v > 0.0)) {
                return Err(bad("speeds", "speeds must be positive"));
            }
        }

        self.latency_params()
            .validate()
            .map_err(|e| bad("latency", e))?;

        if let Some(b) = &self.bounds {
            for (name, v) in [
                ("bounds.l", b.l),
                ("bounds.sigma2", b.sigma2),
                ("bounds.kappa2", b.kappa2),
                ("bounds.delta", b.delta),
            ] {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(bad(name, "must be non-negative and finite"));
                }
            }
        }
        Ok(())
    }
}
