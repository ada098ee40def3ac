//! Datasets, ingestion, and non-IID client partitioning.
//!
//! A [`Dataset`] is a dense feature matrix plus integer labels. Sources:
//!
//! - [`synth_dataset`]: Gaussian class clusters around seeded class means
//!   with unit-variance noise. [`synth_dataset_split`] draws fresh noise
//!   around the *same* means, for held-out evaluation data.
//! - [`load_idx`]: the big-endian IDX image/label format (magic `0x00000803`
//!   for images, `0x00000801` for labels), pixels scaled to `[0, 1]`.
//!
//! Partitioners split sample indices across clients:
//!
//! - [`partition_iid`]: seeded shuffle dealt round-robin.
//! - [`partition_label_skew`]: each client draws `c` distinct classes; each
//!   class's samples split evenly among its holders.
//! - [`partition_dirichlet`]: per-class proportions drawn from a symmetric
//!   Dirichlet with concentration `beta` (small `beta` = heavy skew).
//!
//! [`assign_clusters`] maps clients to edge servers, and [`Partition`]
//! assembles shards plus the cluster map into the three weight families
//!
//! ```text
//! m_i = |S_i| / |S|       (global client weight)
//! m^_i = |S_i| / |S~_d|    (within-cluster weight)
//! m~_d = |S~_d| / |S|      (cluster weight)
//! ```
//!
//! which satisfy `m_i = m^_i * m~_d(i)` and sum to 1 at each level.

use crate::rng::{stream, StreamKind};
use crate::{Error, Result};
use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Gamma;
use std::path::Path;

/// Dense labeled dataset. Every class in `[0, num_classes)` is present.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    num_classes: usize,
}

impl Dataset {
    /// Builds a dataset from a row-major feature buffer and labels.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] if the buffer shape is inconsistent, the dataset is
    /// empty, or some class in `[0, max_label]` has no samples.
    pub fn new(features: Vec<f64>, feature_dim: usize, labels: Vec<usize>) -> Result<Self> {
        if feature_dim == 0 || labels.is_empty() {
            return Err(Error::Config("dataset must be non-empty".into()));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::Config(format!(
                "feature buffer has {} values, expected {} samples x {} features",
                features.len(),
                labels.len(),
                feature_dim
            )));
        }
        let num_classes = labels.iter().max().unwrap() + 1;
        let mut seen = vec![false; num_classes];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!(
                "class {missing} has no samples (labels run up to {})",
                num_classes - 1
            )));
        }
        Ok(Dataset {
            features,
            labels,
            feature_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Feature row of sample `i`.
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Gaussian class clusters: distinct seeded class means (scale 3), unit
/// variance noise, `per_class` samples per class, grouped by class.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Dataset> {
    synth_dataset_split(num_classes, per_class, feature_dim, seed, 0)
}

/// Like [`synth_dataset`] but with noise keyed by `split`, so different
/// splits share class means (same distribution, fresh samples). Split 0 is
/// the default dataset.
pub fn synth_dataset_split(
    num_classes: usize,
    per_class: usize,
    feature_dim: usize,
    seed: u64,
    split: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || feature_dim == 0 {
        return Err(Error::Config("synthetic dataset needs positive counts".into()));
    }
    const MEAN_SCALE: f64 = 3.0;
    let mut mean_rng = stream(seed, StreamKind::SynthMeans, &[num_classes as u64, feature_dim as u64]);
    let means: Vec<f64> = (0..num_classes * feature_dim)
        .map(|_| MEAN_SCALE * gaussian(&mut mean_rng))
        .collect();

    let mut noise_rng = stream(seed, StreamKind::SynthNoise, &[split]);
    let n = num_classes * per_class;
    let mut features = Vec::with_capacity(n * feature_dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        let mean = &means[class * feature_dim..(class + 1) * feature_dim];
        for _ in 0..per_class {
            for &m in mean {
                features.push(m + gaussian(&mut noise_rng));
            }
            labels.push(class);
        }
    }
    Dataset::new(features, feature_dim, labels)
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads a dataset from a big-endian IDX image file and label file.
///
/// Pixels are scaled to `[0, 1]` by dividing by 255; the feature dimension
/// is `rows * cols`.
///
/// # Errors
///
/// [`Error::IdxParse`] naming the byte offset for a wrong magic number, a
/// truncated file, or an image/label count mismatch.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;

    let magic = read_be_u32(&images, 0, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxParse {
            offset: 0,
            message: format!("wrong magic {magic:#010x} for images, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(&images, 4, "image count")? as usize;
    let rows = read_be_u32(&images, 8, "image rows")? as usize;
    let cols = read_be_u32(&images, 12, "image cols")? as usize;
    let pixel_len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::IdxParse {
            offset: 4,
            message: "image dimensions overflow".into(),
        })?;
    if images.len() != 16 + pixel_len {
        return Err(Error::IdxParse {
            offset: images.len().min(16 + pixel_len) as u64,
            message: format!(
                "images file has {} bytes, expected {}",
                images.len(),
                16 + pixel_len
            ),
        });
    }

    let magic = read_be_u32(&labels, 0, "labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxParse {
            offset: 0,
            message: format!("wrong magic {magic:#010x} for labels, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = read_be_u32(&labels, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::IdxParse {
            offset: 4,
            message: format!("label count {label_count} does not match image count {count}"),
        });
    }
    if labels.len() != 8 + label_count {
        return Err(Error::IdxParse {
            offset: labels.len().min(8 + label_count) as u64,
            message: format!(
                "labels file has {} bytes, expected {}",
                labels.len(),
                8 + label_count
            ),
        });
    }

    let features: Vec<f64> = images[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let label_values: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(features, rows * cols, label_values)
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxParse {
            offset: bytes.len() as u64,
            message: format!("truncated while reading {what}"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Client shards plus the client-to-cluster map and all weight ratios.
#[derive(Debug, Clone)]
pub struct Partition {
    assignment: Vec<Vec<usize>>,
    client_to_cluster: Vec<usize>,
    num_servers: usize,
    m: Vec<f64>,
    m_hat: Vec<f64>,
    m_tilde: Vec<f64>,
}

impl Partition {
    /// Assembles shards and a cluster map into a full partition with weights.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] if the shards are not a disjoint cover of
    /// `0..dataset_len`, any client or cluster is empty, or the cluster map
    /// is out of range.
    pub fn new(
        assignment: Vec<Vec<usize>>,
        client_to_cluster: Vec<usize>,
        num_servers: usize,
        dataset_len: usize,
    ) -> Result<Self> {
        let clients = assignment.len();
        if clients == 0 || num_servers == 0 {
            return Err(Error::Config("partition needs clients and servers".into()));
        }
        if client_to_cluster.len() != clients {
            return Err(Error::Config(format!(
                "cluster map covers {} clients, expected {clients}",
                client_to_cluster.len()
            )));
        }
        let mut seen = vec![false; dataset_len];
        for (i, shard) in assignment.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Config(format!("client {i} has no samples")));
            }
            for &idx in shard {
                if idx >= dataset_len {
                    return Err(Error::Config(format!(
                        "client {i} references sample {idx} beyond dataset of {dataset_len}"
                    )));
                }
                if seen[idx] {
                    return Err(Error::Config(format!("sample {idx} assigned twice")));
                }
                seen[idx] = true;
            }
        }
        if let Some(unassigned) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!("sample {unassigned} not assigned")));
        }
        let mut cluster_sizes = vec![0usize; num_servers];
        for (i, &d) in client_to_cluster.iter().enumerate() {
            if d >= num_servers {
                return Err(Error::Config(format!(
                    "client {i} mapped to cluster {d}, only {num_servers} servers"
                )));
            }
            cluster_sizes[d] += assignment[i].len();
        }
        if let Some(empty) = cluster_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("cluster {empty} has no samples")));
        }

        let total = dataset_len as f64;
        let m: Vec<f64> = assignment.iter().map(|s| s.len() as f64 / total).collect();
        let m_tilde: Vec<f64> = cluster_sizes.iter().map(|&s| s as f64 / total).collect();
        let m_hat: Vec<f64> = assignment
            .iter()
            .zip(&client_to_cluster)
            .map(|(s, &d)| s.len() as f64 / cluster_sizes[d] as f64)
            .collect();
        Ok(Partition {
            assignment,
            client_to_cluster,
            num_servers,
            m,
            m_hat,
            m_tilde,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_servers(&self) -> usize {
        self.num_servers
    }

    /// Sample indices held by client `i`.
    pub fn shard(&self, i: usize) -> &[usize] {
        &self.assignment[i]
    }

    /// Cluster of client `i`.
    pub fn cluster_of(&self, i: usize) -> usize {
        self.client_to_cluster[i]
    }

    /// Clients in cluster `d`, ascending.
    pub fn clients_in(&self, d: usize) -> Vec<usize> {
        (0..self.num_clients())
            .filter(|&i| self.client_to_cluster[i] == d)
            .collect()
    }

    /// Global client weights `m_i`.
    pub fn m(&self) -> &[f64] {
        &self.m
    }

    /// Within-cluster client weights `m^_i`.
    pub fn m_hat(&self) -> &[f64] {
        &self.m_hat
    }

    /// Cluster weights `m~_d`.
    pub fn m_tilde(&self) -> &[f64] {
        &self.m_tilde
    }
}

/// IID partition: seeded shuffle dealt round-robin across clients.
pub fn partition_iid(ds: &Dataset, clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || ds.len() < clients {
        return Err(Error::Config(format!(
            "cannot split {} samples across {clients} clients",
            ds.len()
        )));
    }
    let mut rng = stream(seed, StreamKind::IidShuffle, &[clients as u64]);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let mut shards = vec![Vec::new(); clients];
    for (j, idx) in order.into_iter().enumerate() {
        shards[j % clients].push(idx);
    }
    Ok(shards)
}

/// Label-skew partition: each client draws `c` distinct classes; each
/// class's samples are split evenly among its holders (ascending holders
/// take the remainder). Redraws up to 100 times until every class has a
/// holder and every client has a sample.
pub fn partition_label_skew(
    ds: &Dataset,
    clients: usize,
    c: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if c == 0 || c > ds.num_classes() {
        return Err(Error::Config(format!(
            "classes per client {c} out of range 1..={}",
            ds.num_classes()
        )));
    }
    let by_class = indices_by_class(ds);
    const ATTEMPTS: u64 = 100;
    for attempt in 0..ATTEMPTS {
        let mut rng = stream(seed, StreamKind::LabelSkew, &[attempt]);
        let class_sets: Vec<Vec<usize>> = (0..clients)
            .map(|_| {
                let mut picked = rand::seq::index::sample(&mut rng, ds.num_classes(), c).into_vec();
                picked.sort_unstable();
                picked
            })
            .collect();

        let mut holders: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
        for (i, set) in class_sets.iter().enumerate() {
            for &l in set {
                holders[l].push(i);
            }
        }
        if holders.iter().any(|h| h.is_empty()) {
            continue;
        }

        let mut shards = vec![Vec::new(); clients];
        for (class, class_holders) in holders.iter().enumerate() {
            let samples = &by_class[class];
            let h = class_holders.len();
            let base = samples.len() / h;
            let extra = samples.len() % h;
            let mut cursor = 0;
            for (rank, &client) in class_holders.iter().enumerate() {
                let take = base + usize::from(rank < extra);
                shards[client].extend_from_slice(&samples[cursor..cursor + take]);
                cursor += take;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards);
        }
    }
    Err(Error::Config(format!(
        "label-skew partition infeasible after {ATTEMPTS} attempts \
         ({clients} clients, {c} classes each, {} classes total)",
        ds.num_classes()
    )))
}

/// Dirichlet partition: for each class, client proportions drawn from a
/// symmetric Dirichlet with concentration `beta` (gamma draws normalized to
/// the simplex), converted to counts by largest remainder. The whole
/// partition is redrawn up to 100 times until every client has a sample.
pub fn partition_dirichlet(
    ds: &Dataset,
    clients: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Config(format!("concentration beta = {beta} must be positive")));
    }
    let by_class = indices_by_class(ds);
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| Error::Config(format!("invalid gamma parameters: {e}")))?;
    const ATTEMPTS: u64 = 100;
    for attempt in 0..ATTEMPTS {
        let mut shards = vec![Vec::new(); clients];
        for (class, samples) in by_class.iter().enumerate() {
            let mut rng = stream(seed, StreamKind::Dirichlet, &[attempt, class as u64]);
            let mut draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0) {
                // All-zero underflow at tiny beta: fall back to a uniform split.
                draws = vec![1.0; clients];
            }
            let total: f64 = draws.iter().sum();
            let counts = largest_remainder(&draws, total, samples.len());
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                shards[client].extend_from_slice(&samples[cursor..cursor + count]);
                cursor += count;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards);
        }
    }
    Err(Error::Config(format!(
        "dirichlet partition left a client empty after {ATTEMPTS} attempts \
         (beta = {beta}, {clients} clients)"
    )))
}

/// Converts simplex proportions to integer counts summing to `n` by the
/// largest-remainder rule (ties broken by lower index).
fn largest_remainder(draws: &[f64], total: f64, n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(draws.len());
    let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(draws.len());
    let mut assigned = 0;
    for (i, &d) in draws.iter().enumerate() {
        let target = d / total * n as f64;
        let floor = target.floor() as usize;
        counts.push(floor);
        assigned += floor;
        fracs.push((target - floor as f64, i));
    }
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in fracs.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

fn indices_by_class(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for i in 0..ds.len() {
        by_class[ds.label(i)].push(i);
    }
    by_class
}

/// Maps clients to edge servers.
///
/// For the 50-client / 10-server setup the imbalance pattern applies: after
/// a seeded shuffle of the clients, four clusters take 5 clients, three take
/// `5 - gamma`, and three take `5 + gamma`. Any other shape requires
/// `gamma = 0` and deals clients round-robin (`i mod servers`).
///
/// # Errors
///
/// [`Error::Config`] for `gamma >= 5` in the pattern, `gamma > 0` outside
/// the 50/10 shape, or an empty cluster.
pub fn assign_clusters(
    clients: usize,
    servers: usize,
    gamma: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if clients == 0 || servers == 0 {
        return Err(Error::Config("need clients and servers".into()));
    }
    if clients == 50 && servers == 10 {
        if gamma >= 5 {
            return Err(Error::Config(format!(
                "imbalance gamma = {gamma} empties a cluster (needs gamma < 5)"
            )));
        }
        let mut sizes = vec![5usize; 4];
        sizes.extend(std::iter::repeat(5 - gamma).take(3));
        sizes.extend(std::iter::repeat(5 + gamma).take(3));
        let mut order: Vec<usize> = (0..clients).collect();
        let mut rng = stream(seed, StreamKind::ClusterAssign, &[clients as u64, servers as u64, gamma as u64]);
        order.shuffle(&mut rng);
        let mut map = vec![0usize; clients];
        let mut cursor = 0;
        for (cluster, &size) in sizes.iter().enumerate() {
            for &client in &order[cursor..cursor + size] {
                map[client] = cluster;
            }
            cursor += size;
        }
        return Ok(map);
    }
    if gamma != 0 {
        return Err(Error::Config(format!(
            "imbalance pattern is defined for 50 clients / 10 servers, got {clients}/{servers}"
        )));
    }
    if clients < servers {
        return Err(Error::Config(format!(
            "{clients} clients cannot cover {servers} servers"
        )));
    }
    Ok((0..clients).map(|i| i % servers).collect())
}
