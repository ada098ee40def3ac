//! Numerical evaluation of the convergence-bound expressions, so error
//! floors and learning-rate feasibility can be tabulated against runs.
//!
//! For the synchronous schedule (tau1 local steps, tau2 intra rounds per
//! gossip, alpha gossip rounds, spectral gap zeta), the averaged squared
//! gradient norm over K iterations is bounded by
//!
//! ```text
//! theorem1_rhs = 2 Delta / (eta K) + eta L Phi0 + eta^2 L^2 Phi,
//! Phi0 = sum_i m_i^2 sigma^2,      Phi = 2 V1 sigma^2 + 8 V2 kappa^2,
//! ```
//!
//! with deviation constants (writing tau = tau1 tau2, z = zeta^alpha)
//!
//! ```text
//! Lambda = z^2/(1-z^2) + 2z/(1-z) + z^2/(1-z)^2
//! V3 = tau (tau Lambda + (tau-1)/2 * (2-z)/(1-z))
//! V2 = V3 / (1 - 16 eta^2 L^2 V3)
//! V1 = (tau z^2/(1-z^2) + (tau-1)/2) / (1 - 16 eta^2 L^2 V3)
//! ```
//!
//! valid while the learning rate satisfies `1 - eta L - 8 eta^2 L^2 V2 >= 0`
//! and `1 - 16 eta^2 L^2 V3 > 0`.
//!
//! For the event-driven schedule (local epoch counts in
//! `[theta_min, theta_max]`, iteration gap at most delta_max, T events), the
//! bound is
//!
//! ```text
//! theorem2_rhs = 2 Delta / (eta theta_min U1 T)
//!              + eta L theta_max^2 / (U1 theta_min^2) * Phi0
//!              + A sigma^2 / U1 + B kappa^2 / U1,
//! ```
//!
//! with `U2 = theta_max (theta_max - 1)`, `q = eta^2 L^2 U2`,
//! `U1 = (1 - 14q)/(1 - 2q)`, `U3 = (1 + 4q)/(1 - 2q)`,
//! `U4 = (1 + 22q)/(1 - 2q)`, and staleness constants
//!
//! ```text
//! A = 4 e2 dmax^2 tmax^2/tmin U4 + 4 e2 (tmax-1)/(1-2q) + 8 e2 tmax^2/tmin U3 S1
//! B = 8 e2 dmax^2 tmax^2/tmin U4 + 24 e2 U2/(1-2q)     + 16 e2 tmax^2/tmin U3 S2
//! C = 8 e2 dmax^2 tmax U4                               + 16 e2 tmax^2 U3 S2
//! ```
//!
//! where `e2 = eta^2 L^2` and S1, S2 average the mixing-contraction factors
//! rho over the run: with `rho(s, t-1)` the operator-norm distance of the
//! product of mixing matrices `P_s ... P_{t-1}` from the rank-one averaging
//! matrix,
//!
//! ```text
//! S1 = (1/T) sum_t sum_s rho(s, t-1)^2,
//! S2 = (1/T) sum_t (sum_s rho(s, t-1))^2.
//! ```
//!
//! The printed definition of C carries the same rho factor as B (the
//! products telescope identically), so C uses S2. The rho sums come either
//! from a recorded mixing trace (exact) or from the constant-mixing
//! geometric model `rho(s, t-1) = zeta^(t-s)`; [`RhoMode`] records which.
//! The bound is valid while `1 - eta L theta_max^2/theta_min - C >= 0` and
//! `1 - 2 eta^2 L^2 U2 > 0`; additionally `theorem2_rhs` is reported only
//! when U1 > 0, since a non-positive U1 makes the bound vacuous even where
//! the printed feasibility conditions hold.
//!
//! [`estimate_inputs`] produces empirical stand-ins for the analysis-side
//! constants (L, sigma^2, kappa^2, Delta); they are estimates for
//! feasibility checks and tabulation, not certified bounds.

use crate::data::{Dataset, Partition};
use crate::models::ModelSpec;
use crate::numerics::DenseMatrix;
use crate::rng::{stream, StreamKind};
use crate::topology::rho_sequence;
use crate::{Error, Result};
use rand_distr::Distribution;

/// Analysis-side constants for bound evaluation.
///
/// The schedule fields (`eta`, `tau1`, `tau2`, `alpha`, `zeta`, `k`) describe
/// the run being analyzed; [`estimate_inputs`] fills them with neutral
/// placeholders that the caller overrides. For the event-driven bound, `k`
/// is read as the event budget T.
#[derive(Debug, Clone)]
pub struct BoundInputs {
    /// Smoothness constant of the local objectives.
    pub l: f64,
    /// Mini-batch gradient variance bound.
    pub sigma2: f64,
    /// Squared non-IIDness bound (max distance of a client gradient from
    /// the global one).
    pub kappa2: f64,
    /// Learning rate.
    pub eta: f64,
    /// Local steps between intra-cluster aggregations.
    pub tau1: usize,
    /// Intra-cluster aggregations between gossip rounds.
    pub tau2: usize,
    /// Gossip rounds per inter-cluster exchange.
    pub alpha: usize,
    /// Spectral gap of the mixing matrix, in [0, 1).
    pub zeta: f64,
    /// Client data weights m_i.
    pub weights: Vec<f64>,
    /// Initial optimality gap estimate.
    pub delta: f64,
    /// Iteration budget (K for the synchronous bound, T for the
    /// event-driven one).
    pub k: usize,
}

/// How the rho statistics entering A, B, C were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoMode {
    /// Exact suffix-product norms from a recorded mixing-matrix trace.
    Trace,
    /// Constant-mixing geometric model rho(s, t-1) = zeta^(t-s).
    Geometric,
}

/// Source of the rho statistics for [`eval_async_bound`].
#[derive(Debug, Clone, Copy)]
pub enum RhoStats<'a> {
    /// A recorded per-event mixing-matrix trace and the cluster weights.
    Trace {
        /// Mixing matrix of each event, in event order.
        mixes: &'a [DenseMatrix],
        /// Cluster weights defining the averaging matrix.
        weights: &'a [f64],
    },
    /// Constant mixing with the given spectral gap.
    Geometric {
        /// Spectral gap of the constant mixing matrix.
        zeta: f64,
    },
}

/// Evaluated bound constants. [`eval_sync_bound`] fills the synchronous
/// side, [`eval_async_bound`] the event-driven side; fields that a given
/// evaluation does not produce (or that an infeasible learning rate makes
/// undefined) stay `None`.
#[derive(Debug, Clone, Default)]
pub struct BoundBreakdown {
    /// Whether the learning rate satisfies the bound's validity conditions.
    pub lr_feasible: bool,
    /// Per-gossip deviation constant Lambda.
    pub lambda: Option<f64>,
    /// Variance-side deviation constant.
    pub v1: Option<f64>,
    /// Non-IIDness-side deviation constant.
    pub v2: Option<f64>,
    /// Raw deviation constant before the learning-rate correction.
    pub v3: Option<f64>,
    /// Central-limit error floor sum m_i^2 sigma^2.
    pub phi0: Option<f64>,
    /// Deviation error floor 2 V1 sigma^2 + 8 V2 kappa^2.
    pub phi: Option<f64>,
    /// Synchronous-schedule bound on the averaged squared gradient norm.
    pub theorem1_rhs: Option<f64>,
    /// Effective-step correction (1 - 14q)/(1 - 2q).
    pub u1: Option<f64>,
    /// theta_max (theta_max - 1).
    pub u2: Option<f64>,
    /// (1 + 4q)/(1 - 2q).
    pub u3: Option<f64>,
    /// (1 + 22q)/(1 - 2q).
    pub u4: Option<f64>,
    /// Variance coefficient of the event-driven bound.
    pub a: Option<f64>,
    /// Non-IIDness coefficient of the event-driven bound.
    pub b: Option<f64>,
    /// Gradient-norm coefficient entering the feasibility condition.
    pub c: Option<f64>,
    /// Event-driven bound on the averaged squared gradient norm.
    pub theorem2_rhs: Option<f64>,
    /// Provenance of the rho statistics (event-driven side only).
    pub rho_mode: Option<RhoMode>,
}

fn validate_common(inputs: &BoundInputs) -> Result<()> {
    for (name, v) in [
        ("l", inputs.l),
        ("sigma2", inputs.sigma2),
        ("kappa2", inputs.kappa2),
        ("delta", inputs.delta),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Config(format!("{name} = {v} must be non-negative")));
        }
    }
    if !(inputs.eta > 0.0) || !inputs.eta.is_finite() {
        return Err(Error::Config(format!(
            "eta = {} must be positive",
            inputs.eta
        )));
    }
    if !(0.0..1.0).contains(&inputs.zeta) {
        return Err(Error::Config(format!(
            "zeta = {} must lie in [0, 1)",
            inputs.zeta
        )));
    }
    if inputs.tau1 == 0 || inputs.tau2 == 0 || inputs.alpha == 0 || inputs.k == 0 {
        return Err(Error::Config(
            "tau1, tau2, alpha, and k must be positive".into(),
        ));
    }
    if inputs.weights.is_empty() {
        return Err(Error::Config("weights must be non-empty".into()));
    }
    let sum: f64 = inputs.weights.iter().sum();
    if inputs.weights.iter().any(|&w| !(w > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "weights must be positive and sum to 1 (sum = {sum})"
        )));
    }
    Ok(())
}

/// Evaluates the synchronous-schedule bound constants.
///
/// An infeasible learning rate is flagged, not an error: when the
/// denominator `1 - 16 eta^2 L^2 V3` is non-positive, V1, V2, Phi, and the
/// bound value stay `None` while Lambda, V3, and Phi0 are still reported.
///
/// # Errors
///
/// [`Error::Config`] for out-of-domain inputs (negative constants, zeta
/// outside [0, 1), zero schedule parameters, bad weights).
pub fn eval_sync_bound(inputs: &BoundInputs) -> Result<BoundBreakdown> {
    validate_common(inputs)?;
    let tau = (inputs.tau1 * inputs.tau2) as f64;
    let z = inputs.zeta.powi(inputs.alpha as i32);
    let z2 = z * z;
    let lambda = z2 / (1.0 - z2) + 2.0 * z / (1.0 - z) + z2 / ((1.0 - z) * (1.0 - z));
    let v3 = tau * (tau * lambda + (tau - 1.0) / 2.0 * (2.0 - z) / (1.0 - z));
    let phi0: f64 = inputs.weights.iter().map(|&m| m * m * inputs.sigma2).sum();

    let el = inputs.eta * inputs.l;
    let denom = 1.0 - 16.0 * el * el * v3;
    let mut out = BoundBreakdown {
        lambda: Some(lambda),
        v3: Some(v3),
        phi0: Some(phi0),
        ..BoundBreakdown::default()
    };
    if denom <= 0.0 {
        return Ok(out);
    }
    let v1 = (tau * z2 / (1.0 - z2) + (tau - 1.0) / 2.0) / denom;
    let v2 = v3 / denom;
    let phi = 2.0 * v1 * inputs.sigma2 + 8.0 * v2 * inputs.kappa2;
    let rhs = 2.0 * inputs.delta / (inputs.eta * inputs.k as f64)
        + el * phi0
        + el * el * phi;
    out.v1 = Some(v1);
    out.v2 = Some(v2);
    out.phi = Some(phi);
    out.theorem1_rhs = Some(rhs);
    out.lr_feasible = 1.0 - el - 8.0 * el * el * v2 >= 0.0;
    Ok(out)
}

/// Averaged rho statistics `(S1, S2)` over T windows.
fn rho_sums(rho: RhoStats<'_>, t_total: usize) -> Result<(f64, f64, RhoMode)> {
    match rho {
        RhoStats::Trace { mixes, weights } => {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for t in 0..t_total {
                let need = t.saturating_sub(1);
                if need == 0 {
                    continue;
                }
                if need > mixes.len() {
                    return Err(Error::Config(format!(
                        "mixing trace too short: window {t} needs {need} matrices, got {}",
                        mixes.len()
                    )));
                }
                let rhos = rho_sequence(&mixes[..need], weights)?;
                let sum: f64 = rhos.iter().sum();
                s1 += rhos.iter().map(|r| r * r).sum::<f64>();
                s2 += sum * sum;
            }
            let t = t_total as f64;
            Ok((s1 / t, s2 / t, RhoMode::Trace))
        }
        RhoStats::Geometric { zeta } => {
            if !(0.0..1.0).contains(&zeta) {
                return Err(Error::Config(format!(
                    "zeta = {zeta} must lie in [0, 1)"
                )));
            }
            // Window t contributes sum_{r=1}^{t-1} zeta^(2r) to S1 and
            // (sum_{r=1}^{t-1} zeta^r)^2 to S2; accumulate incrementally.
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            let mut pow_sum = 0.0; // sum_{r=1}^{m} zeta^r
            let mut pow_sq_sum = 0.0; // sum_{r=1}^{m} zeta^(2r)
            let mut zr = 1.0;
            for t in 0..t_total {
                if t >= 2 {
                    zr *= zeta;
                    pow_sum += zr;
                    pow_sq_sum += zr * zr;
                }
                s1 += pow_sq_sum;
                s2 += pow_sum * pow_sum;
            }
            let t = t_total as f64;
            Ok((s1 / t, s2 / t, RhoMode::Geometric))
        }
    }
}

/// Evaluates the event-driven bound constants.
///
/// `inputs.k` is read as the event budget T. A learning rate breaking
/// `1 - 2 eta^2 L^2 U2 > 0` leaves everything but U2 `None`; U1 <= 0
/// suppresses only the bound value (the bound is vacuous there even though
/// the printed feasibility conditions may hold).
///
/// # Errors
///
/// [`Error::Config`] for out-of-domain inputs, a bad theta range, or a
/// mixing trace shorter than the windows require.
pub fn eval_async_bound(
    inputs: &BoundInputs,
    theta_min: usize,
    theta_max: usize,
    delta_max: usize,
    rho: RhoStats<'_>,
) -> Result<BoundBreakdown> {
    validate_common(inputs)?;
    if theta_min == 0 || theta_min > theta_max {
        return Err(Error::Config(format!(
            "need 1 <= theta_min <= theta_max, got {theta_min}..={theta_max}"
        )));
    }
    let t_total = inputs.k;
    let (s1, s2, mode) = rho_sums(rho, t_total)?;

    let tmax = theta_max as f64;
    let tmin = theta_min as f64;
    let dmax = delta_max as f64;
    let u2 = tmax * (tmax - 1.0);
    let e2 = (inputs.eta * inputs.l) * (inputs.eta * inputs.l);
    let q = e2 * u2;
    let denom = 1.0 - 2.0 * q;
    let mut out = BoundBreakdown {
        u2: Some(u2),
        rho_mode: Some(mode),
        ..BoundBreakdown::default()
    };
    if denom <= 0.0 {
        return Ok(out);
    }
    let u1 = (1.0 - 14.0 * q) / denom;
    let u3 = (1.0 + 4.0 * q) / denom;
    let u4 = (1.0 + 22.0 * q) / denom;
    let a = 4.0 * e2 * dmax * dmax * tmax * tmax / tmin * u4
        + 4.0 * e2 * (tmax - 1.0) / denom
        + 8.0 * e2 * tmax * tmax / tmin * u3 * s1;
    let b = 8.0 * e2 * dmax * dmax * tmax * tmax / tmin * u4
        + 24.0 * e2 * u2 / denom
        + 16.0 * e2 * tmax * tmax / tmin * u3 * s2;
    let c = 8.0 * e2 * dmax * dmax * tmax * u4 + 16.0 * e2 * tmax * tmax * u3 * s2;
    let phi0: f64 = inputs.weights.iter().map(|&m| m * m * inputs.sigma2).sum();
    out.u1 = Some(u1);
    out.u3 = Some(u3);
    out.u4 = Some(u4);
    out.a = Some(a);
    out.b = Some(b);
    out.c = Some(c);
    out.phi0 = Some(phi0);
    out.lr_feasible = 1.0 - inputs.eta * inputs.l * tmax * tmax / tmin - c >= 0.0;
    if u1 > 0.0 {
        let rhs = 2.0 * inputs.delta / (inputs.eta * tmin * u1 * t_total as f64)
            + inputs.eta * inputs.l * tmax * tmax / (u1 * tmin * tmin) * phi0
            + a * inputs.sigma2 / u1
            + b * inputs.kappa2 / u1;
        out.theorem2_rhs = Some(rhs);
    }
    Ok(out)
}

/// Largest ratio ||g(x) - g(y)|| / ||x - y|| over all point pairs.
fn lipschitz_from_pairs<G: Fn(&[f64]) -> Vec<f64>>(points: &[Vec<f64>], grad: G) -> f64 {
    let grads: Vec<Vec<f64>> = points.iter().map(|p| grad(p)).collect();
    let mut best = 0.0f64;
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            let dw: f64 = points[a]
                .iter()
                .zip(&points[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if dw == 0.0 {
                continue;
            }
            let dg: f64 = grads[a]
                .iter()
                .zip(&grads[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            best = best.max(dg / dw);
        }
    }
    best
}

const PROBE_SCALE: f64 = 0.1;

/// Empirical estimates of the analysis-side constants from data.
///
/// L is the largest gradient-difference ratio over random parameter pairs,
/// sigma^2 the largest per-client mini-batch gradient variance (exactly 0
/// for full-batch sampling, which returns the whole shard), kappa^2 the
/// largest squared distance of a client gradient from the global one, and
/// Delta the loss at the seeded initialization (the optimum is at least 0).
/// All four are estimates for feasibility checks and tabulation, not
/// certified bounds. The schedule fields of the returned inputs are neutral
/// placeholders (`eta` 0.001, `tau1` = `tau2` = `alpha` = `k` = 1, `zeta`
/// 0); set them to the run under analysis before evaluating a bound.
///
/// # Errors
///
/// [`Error::Config`] if `probes < 2` or `batch_size` is 0.
pub fn estimate_inputs(
    ds: &Dataset,
    partition: &Partition,
    spec: &ModelSpec,
    batch_size: usize,
    probes: usize,
    seed: u64,
) -> Result<BoundInputs> {
    if probes < 2 {
        return Err(Error::Config(format!(
            "probes = {probes} must be at least 2"
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let dim = spec.param_count();
    let points: Vec<Vec<f64>> = (0..probes)
        .map(|p| {
            let mut rng = stream(seed, StreamKind::Probe, &[p as u64]);
            (0..dim)
                .map(|_| {
                    let draw: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    PROBE_SCALE * draw
                })
                .collect()
        })
        .collect();

    let all: Vec<usize> = (0..ds.len()).collect();
    let l = lipschitz_from_pairs(&points, |w| spec.grad(w, ds, &all));

    let mut sigma2 = 0.0f64;
    let mut kappa = 0.0f64;
    for point in &points {
        let global = spec.grad(point, ds, &all);
        for i in 0..partition.num_clients() {
            let shard = partition.shard(i);
            let local = spec.grad(point, ds, shard);
            let dist: f64 = local
                .iter()
                .zip(&global)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            kappa = kappa.max(dist);
            if batch_size < shard.len() {
                // Uniform with-replacement sampling: variance of the batch
                // mean is the per-sample variance over the batch size.
                let mut var = 0.0;
                for &j in shard {
                    var += local
                        .iter()
                        .zip(&spec.grad(point, ds, &[j]))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                }
                sigma2 = sigma2.max(var / shard.len() as f64 / batch_size as f64);
            }
        }
    }

    let init = spec.init(seed);
    let delta = spec.loss(&init, ds, &all);
    Ok(BoundInputs {
        l,
        sigma2,
        kappa2: kappa * kappa,
        eta: 0.001,
        tau1: 1,
        tau2: 1,
        alpha: 1,
        zeta: 0.0,
        weights: partition.m().to_vec(),
        delta,
        k: 1,
    })
}
