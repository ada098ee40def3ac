//! Communication/computation latency model and per-scheme run times.
//!
//! A training iteration costs `T_comp = n_mac / (c_cpu * speed)` seconds of
//! computing; moving one model over a link of rate `r` costs `m_bit / r`
//! seconds. Four links exist: client <-> edge server (`r_ct_sr`), edge
//! server <-> edge server (`r_sr_sr`), client <-> cloud (`r_ct_cd`), and
//! edge server <-> cloud (`r_sr_cd`).
//!
//! Closed-form totals for K iterations (communication amortized over the
//! aggregation periods tau1 and tau1*tau2):
//!
//! ```text
//! semi-decentralized:  K (T_comp + T_ct_sr/tau1 + alpha T_sr_sr/(tau1 tau2))
//! cloud-hierarchical:  K (T_comp + T_ct_sr/tau1 + T_sr_cd/(tau1 tau2))
//! cloud-only:          K (T_comp + T_ct_cd/tau1)
//! edge-only:           K (T_comp + T_ct_sr/tau1)
//! ```
//!
//! The running wall clock at iteration k accumulates the same terms with
//! floors, so the final row of a trace equals the closed form whenever
//! `tau1 * tau2` divides K. The asynchronous protocol has no global
//! schedule; its per-cluster iteration time is
//! `T_iter = T_comp + T_ct_sr + T_sr_sr` (upload plus one gossip exchange,
//! broadcast folded into the client link term).

use crate::{Error, Result};

/// Link rates and workload constants of the latency model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyParams {
    /// Multiply-accumulate operations per training iteration.
    pub n_mac: f64,
    /// MAC throughput of a unit-speed client, per second.
    pub c_cpu: f64,
    /// Model size in bits.
    pub m_bit: f64,
    /// Client <-> edge-server rate, bits/s.
    pub r_ct_sr: f64,
    /// Edge-server <-> edge-server rate, bits/s.
    pub r_sr_sr: f64,
    /// Client <-> cloud rate, bits/s.
    pub r_ct_cd: f64,
    /// Edge-server <-> cloud rate, bits/s.
    pub r_sr_cd: f64,
}

impl LatencyParams {
    /// The digit-classification workload constants used throughout the
    /// run-time comparisons.
    pub fn mnist_defaults() -> Self {
        LatencyParams {
            n_mac: 487.54e3,
            c_cpu: 10e9,
            m_bit: 32e6,
            r_ct_sr: 5e6,
            r_sr_sr: 50e6,
            r_ct_cd: 2.5e6,
            r_sr_cd: 5e6,
        }
    }

    /// Validates that all constants are positive and finite.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_mac", self.n_mac),
            ("c_cpu", self.c_cpu),
            ("m_bit", self.m_bit),
            ("r_ct_sr", self.r_ct_sr),
            ("r_sr_sr", self.r_sr_sr),
            ("r_ct_cd", self.r_ct_cd),
            ("r_sr_cd", self.r_sr_cd),
        ];
        for (name, value) in fields {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Config(format!(
                    "latency.{name} = {value} must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Computing time of one iteration for a client of relative `speed`.
    pub fn comp_time(&self, speed: f64) -> f64 {
        self.n_mac / (self.c_cpu * speed)
    }

    /// Client <-> edge-server model transfer time.
    pub fn t_ct_sr(&self) -> f64 {
        self.m_bit / self.r_ct_sr
    }

    /// Edge-server <-> edge-server model transfer time.
    pub fn t_sr_sr(&self) -> f64 {
        self.m_bit / self.r_sr_sr
    }

    /// Client <-> cloud model transfer time.
    pub fn t_ct_cd(&self) -> f64 {
        self.m_bit / self.r_ct_cd
    }

    /// Edge-server <-> cloud model transfer time.
    pub fn t_sr_cd(&self) -> f64 {
        self.m_bit / self.r_sr_cd
    }
}

/// Training schemes the simulator can run and time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Semi-decentralized: intra-cluster aggregation plus edge-server gossip.
    Sdfeel,
    /// Event-driven variant with per-cluster deadlines.
    SdfeelAsync,
    /// Hierarchical: edge aggregation plus periodic cloud aggregation.
    Hierfavg,
    /// Cloud-only federated averaging.
    Fedavg,
    /// Single-cluster edge aggregation, sampled participants.
    Feel,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scheme> {
        match s {
            "sdfeel" => Ok(Scheme::Sdfeel),
            "sdfeel-async" => Ok(Scheme::SdfeelAsync),
            "hierfavg" => Ok(Scheme::Hierfavg),
            "fedavg" => Ok(Scheme::Fedavg),
            "feel" => Ok(Scheme::Feel),
            other => Err(Error::Config(format!(
                "unknown scheme \"{other}\" (expected sdfeel, sdfeel-async, hierfavg, fedavg, or feel)"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Scheme::Sdfeel => "sdfeel",
            Scheme::SdfeelAsync => "sdfeel-async",
            Scheme::Hierfavg => "hierfavg",
            Scheme::Fedavg => "fedavg",
            Scheme::Feel => "feel",
        };
        f.write_str(name)
    }
}

/// Aggregation schedule of a synchronous run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncSchedule {
    /// Total local iterations K.
    pub k: usize,
    /// Iterations per intra-cluster aggregation.
    pub tau1: usize,
    /// Intra-cluster rounds per inter-cluster round.
    pub tau2: usize,
    /// Gossip rounds per inter-cluster aggregation.
    pub alpha: usize,
}

/// Closed-form total run time of the semi-decentralized scheme for a
/// unit-speed fleet.
pub fn sdfeel_total(p: &LatencyParams, k: usize, tau1: usize, tau2: usize, alpha: usize) -> f64 {
    k as f64
        * (p.comp_time(1.0)
            + p.t_ct_sr() / tau1 as f64
            + alpha as f64 * p.t_sr_sr() / (tau1 * tau2) as f64)
}

/// Closed-form total run time of a synchronous scheme for a unit-speed
/// fleet.
///
/// # Errors
///
/// [`Error::Config`] for the asynchronous scheme, which has no global
/// schedule; use [`async_iter_time`] per cluster instead.
pub fn scheme_total(scheme: Scheme, p: &LatencyParams, s: &SyncSchedule) -> Result<f64> {
    scheme_elapsed(scheme, p, p.comp_time(1.0), s, s.k)
}

/// Wall clock after `k` iterations of a synchronous scheme, for a fleet
/// whose slowest client takes `comp` seconds per iteration. Communication
/// terms land at the aggregation boundaries, so with `tau1 * tau2 | k` the
/// value matches the closed-form total.
pub fn scheme_elapsed(
    scheme: Scheme,
    p: &LatencyParams,
    comp: f64,
    s: &SyncSchedule,
    k: usize,
) -> Result<f64> {
    let intra_rounds = (k / s.tau1) as f64;
    let inter_rounds = (k / (s.tau1 * s.tau2)) as f64;
    let base = k as f64 * comp;
    match scheme {
        Scheme::Sdfeel => Ok(base
            + intra_rounds * p.t_ct_sr()
            + inter_rounds * s.alpha as f64 * p.t_sr_sr()),
        Scheme::Hierfavg => Ok(base + intra_rounds * p.t_ct_sr() + inter_rounds * p.t_sr_cd()),
        Scheme::Fedavg => Ok(base + intra_rounds * p.t_ct_cd()),
        Scheme::Feel => Ok(base + intra_rounds * p.t_ct_sr()),
        Scheme::SdfeelAsync => Err(Error::Config(
            "the asynchronous scheme has no fixed schedule; time it per cluster".into(),
        )),
    }
}

/// Per-cluster iteration time of the asynchronous protocol: local computing
/// to the cluster deadline `comp`, one client <-> server exchange, and one
/// server <-> server gossip exchange.
pub fn async_iter_time(p: &LatencyParams, comp: f64) -> f64 {
    comp + p.t_ct_sr() + p.t_sr_sr()
}
