//! Edge-server graphs and model-mixing matrices.
//!
//! Edge servers form a connected undirected graph; each server d carries the
//! data-volume weight `m~_d` of its cluster (positive, summing to 1). Two
//! mixing constructions live here:
//!
//! - [`build_mixing`]: the Laplacian-based matrix used by the synchronous
//!   protocol and the consensus phase,
//!
//!   ```text
//!   P = I - c * L * Omega^-1,   c = 2 / (mu_1 + mu_{D-1}),
//!   Omega = diag(m~),           mu_i = i-th largest eigenvalue of
//!                               Omega^-1/2 L Omega^-1/2
//!   ```
//!
//!   Column d of `Y * P` is `sum_j p^{j,d} y^{(j)}`, so gossip is
//!   right-multiplication. Columns of P sum to 1 and `P m~ = m~`, so one
//!   round preserves the weighted average exactly. The spectral gap `zeta`
//!   (largest non-principal eigenvalue modulus) is the per-round contraction
//!   factor of the *weighted* deviation
//!
//!   ```text
//!   dev(Y) = sqrt( sum_d m~_d ||y_d - ybar||^2 ),  ybar = Y m~,
//!   ```
//!
//!   because `Omega^-1/2 P Omega^1/2 = I - c * Omega^-1/2 L Omega^-1/2` is
//!   symmetric. (In the plain Euclidean norm the contraction factor can
//!   exceed `zeta` by the weight condition number, so deviation is always
//!   measured in the weighted norm here.)
//!
//! - [`build_staleness_mixing`]: the time-varying, symmetric doubly
//!   stochastic matrix the asynchronous protocol builds from iteration gaps
//!   and a non-increasing staleness weight [`Psi`].
//!
//! [`rho_sequence`] evaluates the consensus-status quantities
//! `||P_s ... P_{t-1} - m~ 1^T||_op` that the asynchronous bound needs.

use crate::numerics::DenseMatrix;
use crate::rng::{stream, StreamKind};
use crate::{Error, Result};
use rand::Rng;

/// Connected undirected graph of edge servers with per-cluster data weights.
#[derive(Debug, Clone)]
pub struct ServerGraph {
    d: usize,
    adjacency: Vec<bool>,
    cluster_weights: Vec<f64>,
}

/// The Laplacian-based mixing matrix and its spectral gap.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    /// D x D mixing matrix; columns sum to 1, `p * m~ = m~`.
    pub p: DenseMatrix,
    /// Largest non-principal eigenvalue modulus; in `[0, 1)` for connected
    /// graphs, and the weighted-deviation contraction factor per round.
    pub zeta: f64,
    weights: Vec<f64>,
}

/// One staleness-aware mixing matrix, tied to the event that built it.
#[derive(Debug, Clone)]
pub struct StalenessMixing {
    /// Symmetric doubly stochastic D x D matrix; rows/columns outside the
    /// trigger's closed neighborhood equal identity rows/columns.
    pub p_t: DenseMatrix,
    /// Server that triggered the aggregation.
    pub trigger: usize,
    /// Iteration gaps the matrix was built from (full length-D vector; only
    /// the trigger's closed neighborhood is consulted).
    pub gaps: Vec<usize>,
}

/// Staleness-weight families for the asynchronous mixing matrix.
///
/// Both are positive and non-increasing in the gap. The default is
/// `Reciprocal { scale: 0.5 }`, i.e. `psi(x) = 1 / (2 (x + 1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psi {
    /// `psi(x) = c` for every gap.
    Constant(f64),
    /// `psi(x) = scale / (x + 1)`.
    Reciprocal { scale: f64 },
}

impl Default for Psi {
    fn default() -> Self {
        Psi::Reciprocal { scale: 0.5 }
    }
}

impl Psi {
    /// Evaluates the weight for gap `x`.
    pub fn eval(&self, x: usize) -> f64 {
        match self {
            Psi::Constant(c) => *c,
            Psi::Reciprocal { scale } => scale / (x as f64 + 1.0),
        }
    }
}

const WEIGHT_SUM_TOL: f64 = 1e-12;

impl ServerGraph {
    /// Builds a graph from an explicit undirected edge list.
    ///
    /// # Errors
    ///
    /// Rejects self-loops, out-of-range endpoints, weight vectors that are not
    /// positive and summing to 1, and disconnected graphs.
    pub fn from_edges(d: usize, edges: &[(usize, usize)], cluster_weights: &[f64]) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("server count must be positive".into()));
        }
        Self::check_weights(d, cluster_weights)?;
        let mut adjacency = vec![false; d * d];
        for &(a, b) in edges {
            if a >= d || b >= d {
                return Err(Error::Config(format!(
                    "edge ({a}, {b}) out of range for {d} servers"
                )));
            }
            if a == b {
                return Err(Error::Config(format!("self-loop at server {a}")));
            }
            adjacency[a * d + b] = true;
            adjacency[b * d + a] = true;
        }
        let graph = ServerGraph {
            d,
            adjacency,
            cluster_weights: cluster_weights.to_vec(),
        };
        if !graph.is_connected() {
            return Err(Error::Disconnected);
        }
        Ok(graph)
    }

    /// Ring: server i connected to i-1 and i+1 modulo D.
    pub fn ring(d: usize, cluster_weights: &[f64]) -> Result<Self> {
        if d == 1 {
            return Self::from_edges(1, &[], cluster_weights);
        }
        let edges: Vec<(usize, usize)> = (0..d).map(|i| (i, (i + 1) % d)).collect();
        Self::from_edges(d, &edges, cluster_weights)
    }

    /// Star: server 0 connected to every other server.
    pub fn star(d: usize, cluster_weights: &[f64]) -> Result<Self> {
        let edges: Vec<(usize, usize)> = (1..d).map(|i| (0, i)).collect();
        Self::from_edges(d, &edges, cluster_weights)
    }

    /// Fully connected graph.
    pub fn full(d: usize, cluster_weights: &[f64]) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..d {
            for j in (i + 1)..d {
                edges.push((i, j));
            }
        }
        Self::from_edges(d, &edges, cluster_weights)
    }

    /// Partially connected graph: the ring plus all D/2 diameters
    /// `{i, i + D/2}`. Requires even D >= 4. (For D = 6 this is the
    /// three-regular graph with spectral gap exactly 1/3.)
    pub fn partial(d: usize, cluster_weights: &[f64]) -> Result<Self> {
        if d < 4 || d % 2 != 0 {
            return Err(Error::Config(format!(
                "partial topology needs an even server count >= 4, got {d}"
            )));
        }
        let mut edges: Vec<(usize, usize)> = (0..d).map(|i| (i, (i + 1) % d)).collect();
        for i in 0..d / 2 {
            edges.push((i, i + d / 2));
        }
        Self::from_edges(d, &edges, cluster_weights)
    }

    /// Random connected graph: a random spanning tree plus `extra_edges`
    /// additional distinct edges (fewer if the graph saturates).
    /// Deterministic for a given seed.
    pub fn random_connected(
        d: usize,
        extra_edges: usize,
        cluster_weights: &[f64],
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream(seed, StreamKind::ClusterAssign, &[d as u64, extra_edges as u64]);
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for i in 1..d {
            edges.push((rng.gen_range(0..i), i));
        }
        let mut have: std::collections::HashSet<(usize, usize)> = edges
            .iter()
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect();
        let max_edges = d * (d - 1) / 2;
        let mut added = 0;
        let mut attempts = 0;
        while added < extra_edges && have.len() < max_edges && attempts < 50 * extra_edges + 50 {
            attempts += 1;
            let a = rng.gen_range(0..d);
            let b = rng.gen_range(0..d);
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if have.insert(key) {
                edges.push(key);
                added += 1;
            }
        }
        Self::from_edges(d, &edges, cluster_weights)
    }

    /// Equal weights `1/d`.
    pub fn uniform_weights(d: usize) -> Vec<f64> {
        vec![1.0 / d as f64; d]
    }

    fn check_weights(d: usize, w: &[f64]) -> Result<()> {
        if w.len() != d {
            return Err(Error::Config(format!(
                "{} cluster weights for {d} servers",
                w.len()
            )));
        }
        if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Config("cluster weights must be positive".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Config(format!(
                "cluster weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Number of edge servers.
    pub fn len(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.d == 0
    }

    /// Per-cluster data weights `m~`.
    pub fn cluster_weights(&self) -> &[f64] {
        &self.cluster_weights
    }

    /// Whether servers `a` and `b` share an edge.
    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a * self.d + b]
    }

    /// Neighbor list of server `i` (ascending, excludes `i`).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.d).filter(|&j| self.has_edge(i, j)).collect()
    }

    /// Degree of server `i`.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.d).filter(|&j| self.has_edge(i, j)).count()
    }

    /// Graph Laplacian `L = diag(deg) - A`.
    pub fn laplacian(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.d, self.d, |i, j| {
            if i == j {
                self.degree(i) as f64
            } else if self.has_edge(i, j) {
                -1.0
            } else {
                0.0
            }
        })
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.d];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for u in self.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Builds the Laplacian-based mixing matrix and its spectral gap.
///
/// See the module docs for the formula. The single-server graph degenerates
/// to `P = [1]`, `zeta = 0`.
pub fn build_mixing(graph: &ServerGraph) -> Result<MixingMatrix> {
    let d = graph.len();
    let w = graph.cluster_weights();
    if d == 1 {
        return Ok(MixingMatrix {
            p: DenseMatrix::identity(1),
            zeta: 0.0,
            weights: w.to_vec(),
        });
    }

    let lap = graph.laplacian();
    // Same spectrum as L * Omega^-1, but symmetric.
    let similarity = DenseMatrix::from_fn(d, d, |i, j| lap[(i, j)] / (w[i] * w[j]).sqrt());
    let mu = similarity.sym_eigenvalues()?.eigenvalues;
    // mu is sorted descending; mu[d-1] ~ 0 is the stationary direction.
    let c = 2.0 / (mu[0] + mu[d - 2]);
    let p = DenseMatrix::from_fn(d, d, |i, j| {
        let identity = if i == j { 1.0 } else { 0.0 };
        identity - c * lap[(i, j)] / w[j]
    });
    let zeta = mu[..d - 1]
        .iter()
        .fold(0.0f64, |m, &mu_i| m.max((1.0 - c * mu_i).abs()));
    assert!(
        zeta < 1.0 - 1e-9,
        "connected graph must contract: zeta = {zeta}"
    );
    Ok(MixingMatrix {
        p,
        zeta,
        weights: w.to_vec(),
    })
}

impl MixingMatrix {
    /// The cluster weights the matrix preserves.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// One gossip round: `Y <- Y * P` for a models matrix with one cluster per
/// column. Preserves the weighted average `Y * m~` exactly up to round-off.
pub fn consensus_round(models: &DenseMatrix, mix: &MixingMatrix) -> Result<DenseMatrix> {
    models.matmul(&mix.p)
}

/// Weighted average of the columns: `Y * m~`.
pub fn weighted_mean(models: &DenseMatrix, weights: &[f64]) -> Result<Vec<f64>> {
    models.mul_vec(weights)
}

/// Deviation of the columns from their weighted average, in the weighted
/// norm `sqrt(sum_d m~_d ||y_d - ybar||^2)`. This is the quantity `zeta`
/// contracts per gossip round.
pub fn weighted_deviation(models: &DenseMatrix, weights: &[f64]) -> Result<f64> {
    let mean = weighted_mean(models, weights)?;
    let mut acc = 0.0;
    for (d, &w) in weights.iter().enumerate() {
        let mut sq = 0.0;
        for i in 0..models.rows() {
            let diff = models[(i, d)] - mean[i];
            sq += diff * diff;
        }
        acc += w * sq;
    }
    Ok(acc.sqrt())
}

/// Largest Euclidean distance between any two columns.
pub fn max_pairwise_distance(models: &DenseMatrix) -> f64 {
    let d = models.cols();
    let mut max = 0.0f64;
    for a in 0..d {
        for b in (a + 1)..d {
            let mut sq = 0.0;
            for i in 0..models.rows() {
                let diff = models[(i, a)] - models[(i, b)];
                sq += diff * diff;
            }
            max = max.max(sq.sqrt());
        }
    }
    max
}

/// Builds the staleness-aware mixing matrix for one aggregation event.
///
/// `gaps` is indexed by server; only entries in the trigger's closed
/// neighborhood are consulted. With weight values `psi_i = psi(gaps[i])` and
/// `Psi = sum_{i in N_d + {d}} psi_i`:
///
/// ```text
/// p^{i,d} = psi_i / Psi            for i in N_d + {d}   (trigger column)
/// p^{d,j} = p^{j,d}                for j in N_d          (mirror row)
/// p^{j,j} = 1 - p^{d,j}            for j in N_d
/// p^{j,j} = 1                      for j outside N_d + {d}
/// p^{i,j} = 0                      otherwise
/// ```
///
/// The result is symmetric and doubly stochastic.
///
/// # Errors
///
/// [`Error::Config`] if the trigger is out of range, the gap vector has the
/// wrong length, or `psi` evaluates non-positive on a consulted gap.
pub fn build_staleness_mixing(
    graph: &ServerGraph,
    trigger: usize,
    gaps: &[usize],
    psi: Psi,
) -> Result<StalenessMixing> {
    let d = graph.len();
    if trigger >= d {
        return Err(Error::Config(format!(
            "trigger server {trigger} out of range for {d} servers"
        )));
    }
    if gaps.len() != d {
        return Err(Error::Config(format!(
            "{} iteration gaps for {d} servers",
            gaps.len()
        )));
    }
    let mut hood = graph.neighbors(trigger);
    hood.push(trigger);
    hood.sort_unstable();

    let mut psi_sum = 0.0;
    let mut psi_val = vec![0.0; d];
    for &i in &hood {
        let v = psi.eval(gaps[i]);
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Config(format!(
                "staleness weight psi({}) = {v} must be positive",
                gaps[i]
            )));
        }
        psi_val[i] = v;
        psi_sum += v;
    }

    let mut p_t = DenseMatrix::zeros(d, d);
    for j in 0..d {
        if !hood.contains(&j) {
            p_t[(j, j)] = 1.0;
        }
    }
    for &i in &hood {
        p_t[(i, trigger)] = psi_val[i] / psi_sum;
    }
    for &j in &hood {
        if j == trigger {
            continue;
        }
        p_t[(trigger, j)] = p_t[(j, trigger)];
        p_t[(j, j)] = 1.0 - p_t[(trigger, j)];
    }

    Ok(StalenessMixing {
        p_t,
        trigger,
        gaps: gaps.to_vec(),
    })
}

/// Operator-norm distances of suffix products to the weighted-averaging
/// matrix: for a trace `P_0 .. P_{n-1}`, entry `s` is
/// `|| P_s * P_{s+1} * ... * P_{n-1} - m~ 1^T ||_op`.
///
/// With uniform weights and doubly stochastic factors every entry is at most
/// 1; for non-uniform weights the Euclidean operator norm can exceed 1 even
/// for a single doubly stochastic factor, so no such bound is enforced here.
pub fn rho_sequence(mixes: &[DenseMatrix], weights: &[f64]) -> Result<Vec<f64>> {
    let d = weights.len();
    for m in mixes {
        if m.rows() != d || m.cols() != d {
            return Err(Error::DimMismatch(m.rows(), m.cols(), d, d));
        }
    }
    let avg = DenseMatrix::from_fn(d, d, |i, _| weights[i]);
    let mut rhos = vec![0.0; mixes.len()];
    let mut product: Option<DenseMatrix> = None;
    for s in (0..mixes.len()).rev() {
        let next = match &product {
            None => mixes[s].clone(),
            Some(rest) => mixes[s].matmul(rest)?,
        };
        rhos[s] = next.sub(&avg)?.operator_norm()?;
        product = Some(next);
    }
    Ok(rhos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(d: usize) -> Vec<f64> {
        ServerGraph::uniform_weights(d)
    }

    /// Positive weight vector summing to 1, derived from integer volumes so
    /// ratios stay in a realistic partition-like range.
    fn weights_from_volumes(volumes: &[u32]) -> Vec<f64> {
        let total: u32 = volumes.iter().sum();
        volumes.iter().map(|&v| v as f64 / total as f64).collect()
    }

    #[test]
    fn named_topologies_have_expected_spectral_gaps() {
        struct Case {
            label: &'static str,
            graph: ServerGraph,
            want_zeta: f64,
        }
        let cases = [
            Case {
                label: "ring of 6",
                graph: ServerGraph::ring(6, &uniform(6)).unwrap(),
                want_zeta: 0.60,
            },
            Case {
                label: "star of 6",
                graph: ServerGraph::star(6, &uniform(6)).unwrap(),
                want_zeta: 5.0 / 7.0,
            },
            Case {
                label: "partial of 6",
                graph: ServerGraph::partial(6, &uniform(6)).unwrap(),
                want_zeta: 1.0 / 3.0,
            },
            Case {
                label: "full of 6",
                graph: ServerGraph::full(6, &uniform(6)).unwrap(),
                want_zeta: 0.0,
            },
        ];
        for case in cases {
            let mix = build_mixing(&case.graph).unwrap();
            assert!(
                (mix.zeta - case.want_zeta).abs() < 1e-9,
                "{}: zeta = {}, want {}",
                case.label,
                mix.zeta,
                case.want_zeta
            );
        }
    }

    #[test]
    fn full_graph_mixing_is_uniform_averaging() {
        let mix = build_mixing(&ServerGraph::full(6, &uniform(6)).unwrap()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!(
                    (mix.p[(i, j)] - 1.0 / 6.0).abs() < 1e-12,
                    "entry ({i},{j}) = {}",
                    mix.p[(i, j)]
                );
            }
        }
    }

    #[test]
    fn two_node_path_mixing_matches_hand_computation() {
        let mix = build_mixing(&ServerGraph::ring(2, &uniform(2)).unwrap()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((mix.p[(i, j)] - 0.5).abs() < 1e-12);
            }
        }
        assert!(mix.zeta.abs() < 1e-12, "zeta = {}", mix.zeta);
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let err = ServerGraph::from_edges(4, &[(0, 1), (2, 3)], &uniform(4)).unwrap_err();
        assert!(matches!(err, Error::Disconnected));
    }

    #[test]
    fn partial_topology_requires_even_order() {
        assert!(ServerGraph::partial(5, &uniform(5)).is_err());
        assert!(ServerGraph::partial(2, &uniform(2)).is_err());
        assert!(ServerGraph::partial(8, &uniform(8)).is_ok());
    }

    #[test]
    fn bad_weights_are_rejected() {
        assert!(ServerGraph::ring(3, &[0.5, 0.5, 0.5]).is_err());
        assert!(ServerGraph::ring(3, &[0.5, 0.6, -0.1]).is_err());
        assert!(ServerGraph::ring(3, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn mixing_preserves_weights_for_uneven_clusters() {
        let w = weights_from_volumes(&[10, 3, 7, 5]);
        let mix = build_mixing(&ServerGraph::ring(4, &w).unwrap()).unwrap();
        for j in 0..4 {
            let col_sum: f64 = (0..4).map(|i| mix.p[(i, j)]).sum();
            assert!((col_sum - 1.0).abs() < 1e-12, "column {j} sums to {col_sum}");
        }
        let pm = mix.p.mul_vec(&w).unwrap();
        for (got, want) in pm.iter().zip(&w) {
            assert!((got - want).abs() < 1e-12, "P*m~ drifted: {got} vs {want}");
        }
    }

    #[test]
    fn consensus_round_fixed_point_and_averaging() {
        let mix = build_mixing(&ServerGraph::full(4, &uniform(4)).unwrap()).unwrap();
        let constant = DenseMatrix::from_fn(3, 4, |i, _| i as f64 + 0.5);
        let after = consensus_round(&constant, &mix).unwrap();
        assert!(constant.max_abs_diff(&after) < 1e-12, "consensus is a fixed point");

        let spread = DenseMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let mixed = consensus_round(&spread, &mix).unwrap();
        let mean = weighted_mean(&spread, &uniform(4)).unwrap();
        for j in 0..4 {
            for i in 0..3 {
                assert!(
                    (mixed[(i, j)] - mean[i]).abs() < 1e-12,
                    "full graph averages in one round"
                );
            }
        }
    }

    #[test]
    fn ring_gossip_contracts_weighted_deviation_by_zeta() {
        let w = uniform(6);
        let mix = build_mixing(&ServerGraph::ring(6, &w).unwrap()).unwrap();
        let mut models = DenseMatrix::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let mut dev = weighted_deviation(&models, &w).unwrap();
        for round in 0..5 {
            models = consensus_round(&models, &mix).unwrap();
            let next = weighted_deviation(&models, &w).unwrap();
            assert!(
                next <= mix.zeta * dev + 1e-9,
                "round {round}: deviation {next} vs bound {}",
                mix.zeta * dev
            );
            dev = next;
        }
    }

    #[test]
    fn staleness_mixing_matches_worked_three_cluster_example() {
        // Path 0 - 1 - 2, trigger 0, neighbor gap 2.
        let graph = ServerGraph::from_edges(3, &[(0, 1), (1, 2)], &uniform(3)).unwrap();
        let psi = Psi::default();
        let mixing = build_staleness_mixing(&graph, 0, &[0, 2, 0], psi).unwrap();
        let psi0 = psi.eval(0);
        let psi2 = psi.eval(2);
        let total = psi0 + psi2;
        let want = [
            [psi0 / total, psi2 / total, 0.0],
            [psi2 / total, 1.0 - psi2 / total, 0.0],
            [0.0, 0.0, 1.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (mixing.p_t[(i, j)] - want[i][j]).abs() < 1e-15,
                    "entry ({i},{j}) = {}, want {}",
                    mixing.p_t[(i, j)],
                    want[i][j]
                );
            }
        }
    }

    #[test]
    fn constant_psi_with_zero_gaps_gives_uniform_trigger_column() {
        let graph = ServerGraph::full(4, &uniform(4)).unwrap();
        let mixing =
            build_staleness_mixing(&graph, 2, &[0, 0, 0, 0], Psi::Constant(1.0)).unwrap();
        for i in 0..4 {
            assert!(
                (mixing.p_t[(i, 2)] - 0.25).abs() < 1e-15,
                "trigger column entry {i} = {}",
                mixing.p_t[(i, 2)]
            );
        }
    }

    #[test]
    fn nonpositive_psi_is_rejected() {
        let graph = ServerGraph::ring(3, &uniform(3)).unwrap();
        let err = build_staleness_mixing(&graph, 0, &[0, 0, 0], Psi::Constant(0.0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rho_of_identity_and_of_uniform_averaging() {
        let w = uniform(5);
        let rho_id = rho_sequence(&[DenseMatrix::identity(5)], &w).unwrap();
        assert!(rho_id[0] <= 1.0 + 1e-12, "rho(I) = {} should be <= 1", rho_id[0]);

        let avg = DenseMatrix::from_fn(5, 5, |_, _| 0.2);
        let rho_avg = rho_sequence(&[avg], &w).unwrap();
        assert!(rho_avg[0] < 1e-12, "rho of exact averaging = {}", rho_avg[0]);
    }

    #[test]
    fn repeated_ring_mixing_has_geometric_rho() {
        let w = uniform(6);
        let mix = build_mixing(&ServerGraph::ring(6, &w).unwrap()).unwrap();
        let mixes: Vec<DenseMatrix> = (0..5).map(|_| mix.p.clone()).collect();
        let rhos = rho_sequence(&mixes, &w).unwrap();
        for (s, rho) in rhos.iter().enumerate() {
            let power = (mixes.len() - s) as i32;
            let want = mix.zeta.powi(power);
            assert!(
                (rho - want).abs() < 1e-8,
                "rho for {power} rounds = {rho}, want zeta^{power} = {want}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mixing_invariants_on_random_graphs(
            d in 2usize..9,
            extra in 0usize..6,
            volumes in proptest::collection::vec(1u32..40, 2..9),
            seed in 0u64..1000,
        ) {
            let volumes = if volumes.len() < d {
                let mut v = volumes;
                while v.len() < d { v.push(7); }
                v
            } else { volumes[..d].to_vec() };
            let w = weights_from_volumes(&volumes);
            let graph = ServerGraph::random_connected(d, extra, &w, seed).unwrap();
            let mix = build_mixing(&graph).unwrap();

            prop_assert!(mix.zeta >= 0.0 && mix.zeta < 1.0 - 1e-9);
            for j in 0..d {
                let col_sum: f64 = (0..d).map(|i| mix.p[(i, j)]).sum();
                prop_assert!((col_sum - 1.0).abs() < 1e-12, "column {} sum {}", j, col_sum);
            }
            let pm = mix.p.mul_vec(&w).unwrap();
            for (got, want) in pm.iter().zip(&w) {
                prop_assert!((got - want).abs() < 1e-12);
            }
            // Entries of P can leave [-1, 1] for skewed volumes, so no bound
            // on max_abs here; the contraction below is the real invariant.

            // One gossip round contracts weighted deviation by zeta.
            let models = DenseMatrix::from_fn(3, d, |i, j| ((i * 13 + j * 5 + seed as usize) % 11) as f64 - 5.0);
            let dev0 = weighted_deviation(&models, &w).unwrap();
            let after = consensus_round(&models, &mix).unwrap();
            let dev1 = weighted_deviation(&after, &w).unwrap();
            prop_assert!(dev1 <= mix.zeta * dev0 + 1e-9, "deviation {} vs bound {}", dev1, mix.zeta * dev0);
        }

        #[test]
        fn uniform_weight_mixing_is_symmetric_doubly_stochastic(
            d in 2usize..9,
            extra in 0usize..6,
            seed in 0u64..1000,
        ) {
            let graph = ServerGraph::random_connected(d, extra, &uniform(d), seed).unwrap();
            let mix = build_mixing(&graph).unwrap();
            for i in 0..d {
                let row_sum: f64 = (0..d).map(|j| mix.p[(i, j)]).sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-12);
                for j in 0..d {
                    prop_assert!((mix.p[(i, j)] - mix.p[(j, i)]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn staleness_mixing_is_doubly_stochastic(
            d in 2usize..9,
            extra in 0usize..6,
            trigger_pick in 0usize..100,
            gaps in proptest::collection::vec(0usize..7, 9),
            seed in 0u64..1000,
        ) {
            let graph = ServerGraph::random_connected(d, extra, &uniform(d), seed).unwrap();
            let trigger = trigger_pick % d;
            let mixing = build_staleness_mixing(&graph, trigger, &gaps[..d], Psi::default()).unwrap();
            for i in 0..d {
                let row_sum: f64 = (0..d).map(|j| mixing.p_t[(i, j)]).sum();
                let col_sum: f64 = (0..d).map(|j| mixing.p_t[(j, i)]).sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-12, "row {} sums to {}", i, row_sum);
                prop_assert!((col_sum - 1.0).abs() < 1e-12, "column {} sums to {}", i, col_sum);
                for j in 0..d {
                    let entry = mixing.p_t[(i, j)];
                    prop_assert!((-1e-15..=1.0 + 1e-15).contains(&entry));
                }
            }
        }

        #[test]
        fn alpha_rounds_contract_by_zeta_to_the_alpha(
            d in 2usize..8,
            alpha in 1usize..6,
            seed in 0u64..500,
        ) {
            let w = uniform(d);
            let graph = ServerGraph::random_connected(d, 1, &w, seed).unwrap();
            let mix = build_mixing(&graph).unwrap();
            let mut models = DenseMatrix::from_fn(4, d, |i, j| ((i * 3 + j * 7 + seed as usize) % 13) as f64);
            let dev0 = weighted_deviation(&models, &w).unwrap();
            for _ in 0..alpha {
                models = consensus_round(&models, &mix).unwrap();
            }
            let dev = weighted_deviation(&models, &w).unwrap();
            prop_assert!(
                dev <= mix.zeta.powi(alpha as i32) * dev0 + 1e-9,
                "{} rounds: deviation {} vs bound {}", alpha, dev, mix.zeta.powi(alpha as i32) * dev0
            );
        }
    }
}
