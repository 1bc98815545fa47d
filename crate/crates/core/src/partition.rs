//! IID and extended-Dirichlet client data partitions.
//!
//! A partition assigns every pool index to exactly one client. The
//! extended-Dirichlet builder gives each client exactly `C` distinct classes
//! and splits each class among its assigned clients with a Dirichlet draw,
//! which is how the non-IID scenarios are produced.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Per-class sample fractions; entries are non-negative and sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidDistribution(
                "entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

/// Fraction of each class in `labels`. Labels must lie in `0..num_classes`.
pub fn class_distribution(labels: &[usize], num_classes: usize) -> Result<ClassDistribution> {
    if labels.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let counts = class_counts(labels, num_classes)?;
    let total = labels.len() as f64;
    ClassDistribution::new(counts.iter().map(|&c| c as f64 / total).collect())
}

/// Raw per-class counts, validating the label range.
pub fn class_counts(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_classes];
    for &label in labels {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        counts[label] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    ExtendedDirichlet,
}

impl std::str::FromStr for PartitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iid" => Ok(PartitionKind::Iid),
            "dirichlet" | "extended_dirichlet" | "extended-dirichlet" => {
                Ok(PartitionKind::ExtendedDirichlet)
            }
            other => Err(Error::InvalidConfig(format!(
                "unknown partition kind `{other}`"
            ))),
        }
    }
}

/// How to split a pool across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub clients: usize,
    /// Distinct classes per client; Dirichlet kind only.
    #[serde(default)]
    pub classes_per_client: usize,
    /// Dirichlet concentration; Dirichlet kind only.
    #[serde(default)]
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(clients: usize, seed: u64) -> Self {
        Self {
            kind: PartitionKind::Iid,
            clients,
            classes_per_client: 0,
            alpha: 0.0,
            seed,
        }
    }

    pub fn extended_dirichlet(
        clients: usize,
        classes_per_client: usize,
        alpha: f64,
        seed: u64,
    ) -> Self {
        Self {
            kind: PartitionKind::ExtendedDirichlet,
            clients,
            classes_per_client,
            alpha,
            seed,
        }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidPartitionSpec(
                "client count must be at least 1".into(),
            ));
        }
        if self.kind == PartitionKind::ExtendedDirichlet {
            if self.classes_per_client == 0 || self.classes_per_client > num_classes {
                return Err(Error::InvalidPartitionSpec(format!(
                    "classes_per_client must be in 1..={num_classes}"
                )));
            }
            if self.alpha <= 0.0 || self.alpha.is_nan() {
                return Err(Error::InvalidPartitionSpec("alpha must be positive".into()));
            }
            if self.clients * self.classes_per_client < num_classes {
                return Err(Error::ClassUncovered {
                    clients: self.clients,
                    classes_per_client: self.classes_per_client,
                    classes: num_classes,
                });
            }
        }
        Ok(())
    }
}

/// Disjoint per-client index sets over a pool, with per-client class
/// distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    client_indices: Vec<Vec<usize>>,
    client_sizes: Vec<usize>,
    client_distributions: Vec<ClassDistribution>,
    num_classes: usize,
    pool_size: usize,
    /// Set when a class ran out of samples before every assigned client could
    /// receive one, leaving some client with fewer classes than requested.
    truncated: bool,
    spec: Option<PartitionSpec>,
}

impl Partition {
    fn build(
        client_indices: Vec<Vec<usize>>,
        dataset: &LabeledDataset,
        truncated: bool,
        spec: Option<PartitionSpec>,
    ) -> Result<Self> {
        let client_sizes: Vec<usize> = client_indices.iter().map(Vec::len).collect();
        let client_distributions = client_indices
            .iter()
            .map(|indices| {
                let labels: Vec<usize> = indices.iter().map(|&i| dataset.label(i)).collect();
                class_distribution(&labels, dataset.num_classes())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            client_indices,
            client_sizes,
            client_distributions,
            num_classes: dataset.num_classes(),
            pool_size: dataset.len(),
            truncated,
            spec,
        })
    }

    /// The whole pool as a single client, in natural index order.
    pub fn single(dataset: &LabeledDataset) -> Result<Self> {
        Self::build(vec![(0..dataset.len()).collect()], dataset, false, None)
    }

    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn client_indices(&self) -> &[Vec<usize>] {
        &self.client_indices
    }

    pub fn client_sizes(&self) -> &[usize] {
        &self.client_sizes
    }

    pub fn client_distributions(&self) -> &[ClassDistribution] {
        &self.client_distributions
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn spec(&self) -> Option<&PartitionSpec> {
        self.spec.as_ref()
    }

    /// Check the structural invariants against the dataset the partition was
    /// built over: disjoint index sets whose union is the pool, consistent
    /// sizes, consistent distributions.
    pub fn validate(&self, dataset: &LabeledDataset) -> Result<()> {
        if self.pool_size != dataset.len() {
            return Err(Error::ShapeMismatch(format!(
                "partition covers {} samples, dataset has {}",
                self.pool_size,
                dataset.len()
            )));
        }
        let mut seen = vec![false; dataset.len()];
        for (k, indices) in self.client_indices.iter().enumerate() {
            if indices.len() != self.client_sizes[k] {
                return Err(Error::ShapeMismatch(format!(
                    "client {k} size field disagrees with its index set"
                )));
            }
            for &i in indices {
                if i >= dataset.len() || seen[i] {
                    return Err(Error::ShapeMismatch(format!(
                        "index {i} out of range or duplicated"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::ShapeMismatch(
                "client index sets do not cover the pool".into(),
            ));
        }
        Ok(())
    }
}

/// Uniformly shuffle the pool and split it into `clients` contiguous chunks
/// whose sizes differ by at most one (the remainder goes to the first chunks).
pub fn iid_partition(dataset: &LabeledDataset, clients: usize, seed: u64) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::InvalidPartitionSpec(
            "client count must be at least 1".into(),
        ));
    }
    if clients > dataset.len() {
        return Err(Error::TooManyClients {
            clients,
            pool: dataset.len(),
        });
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = rng::stream(seed, "iid-shuffle", 0);
    indices.shuffle(&mut shuffle_rng);

    let base = dataset.len() / clients;
    let remainder = dataset.len() % clients;
    let mut client_indices = Vec::with_capacity(clients);
    let mut offset = 0;
    for k in 0..clients {
        let size = base + usize::from(k < remainder);
        client_indices.push(indices[offset..offset + size].to_vec());
        offset += size;
    }
    Partition::build(
        client_indices,
        dataset,
        false,
        Some(PartitionSpec::iid(clients, seed)),
    )
}

/// Build a non-IID partition where every client holds exactly
/// `spec.classes_per_client` distinct classes (fewer only when a class's
/// sample budget runs out, which sets the `truncated` flag).
pub fn extended_dirichlet_partition(
    dataset: &LabeledDataset,
    spec: &PartitionSpec,
) -> Result<Partition> {
    if spec.kind != PartitionKind::ExtendedDirichlet {
        return Err(Error::InvalidPartitionSpec(
            "spec kind must be extended_dirichlet".into(),
        ));
    }
    let classes = dataset.num_classes();
    spec.validate(classes)?;

    // Indices of each class's samples, in ascending pool order.
    let mut class_members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..dataset.len() {
        class_members[dataset.label(i)].push(i);
    }
    if let Some(class) = class_members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass { class });
    }

    let assignments = assign_classes(spec, classes)?;

    // Invert: which clients hold each class, ascending.
    let mut class_clients: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (k, assigned) in assignments.iter().enumerate() {
        for &m in assigned {
            class_clients[m].push(k);
        }
    }

    let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); spec.clients];
    let mut truncated = false;
    for (m, members) in class_members.iter().enumerate() {
        let holders = &class_clients[m];
        let mut pool = members.clone();
        pool.shuffle(&mut rng::stream(spec.seed, "class-shuffle", m as u64));

        let weights = dirichlet_weights(
            spec.alpha,
            holders.len(),
            &mut rng::stream(spec.seed, "dirichlet", m as u64),
        )?;
        let mut shares = largest_remainder(pool.len(), &weights);
        if pool.len() >= holders.len() {
            reallocate_zero_shares(&mut shares);
        } else {
            truncated = true;
        }

        let mut offset = 0;
        for (h, &share) in holders.iter().zip(shares.iter()) {
            client_indices[*h].extend_from_slice(&pool[offset..offset + share]);
            offset += share;
        }
        debug_assert_eq!(offset, pool.len());
    }

    Partition::build(client_indices, dataset, truncated, Some(spec.clone()))
}

/// Give each client `classes_per_client` distinct classes, always picking
/// among the currently least-assigned classes and breaking ties with the
/// seeded RNG. Coverage of every class is guaranteed when
/// `clients * classes_per_client >= classes`.
fn assign_classes(spec: &PartitionSpec, classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut assign_rng = rng::stream(spec.seed, "class-assign", 0);
    let mut load = vec![0usize; classes];
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(spec.clients);
    for _ in 0..spec.clients {
        let mut mine: Vec<usize> = Vec::with_capacity(spec.classes_per_client);
        for _ in 0..spec.classes_per_client {
            let min_load = (0..classes)
                .filter(|m| !mine.contains(m))
                .map(|m| load[m])
                .min()
                .expect("classes_per_client <= classes");
            let candidates: Vec<usize> = (0..classes)
                .filter(|m| !mine.contains(m) && load[*m] == min_load)
                .collect();
            let pick = candidates[assign_rng.random_range(0..candidates.len())];
            load[pick] += 1;
            mine.push(pick);
        }
        mine.sort_unstable();
        assignments.push(mine);
    }
    Ok(assignments)
}

/// Dirichlet(alpha, ..., alpha) over `n` parts via normalized Gamma draws.
fn dirichlet_weights(alpha: f64, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let gamma =
        Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidPartitionSpec(format!("alpha: {e}")))?;
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let mut sum: f64 = draws.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        // Vanishingly small alpha can underflow every draw; fall back to a
        // single random winner, the limiting behavior of Dirichlet(alpha->0).
        let winner = rng.random_range(0..n);
        draws = vec![0.0; n];
        draws[winner] = 1.0;
        sum = 1.0;
    }
    Ok(draws.into_iter().map(|d| d / sum).collect())
}

/// Split `total` items proportionally to `weights`, conserving the total
/// exactly: floor the quotas, then hand the leftover units to the largest
/// fractional remainders (ties to the lower index).
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        shares[i] += 1;
    }
    shares
}

/// Ensure every share is at least 1 by moving single samples away from the
/// largest recipient. Requires `sum(shares) >= len(shares)`.
fn reallocate_zero_shares(shares: &mut [usize]) {
    debug_assert!(shares.iter().sum::<usize>() >= shares.len());
    while let Some(zero_at) = shares.iter().position(|&s| s == 0) {
        let donor = (0..shares.len())
            .max_by_key(|&i| shares[i])
            .expect("non-empty shares");
        debug_assert!(shares[donor] > 1);
        shares[donor] -= 1;
        shares[zero_at] += 1;
    }
}

/// On-disk partition format: `{K, C, alpha, seed, client_indices}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    #[serde(rename = "K")]
    pub clients: usize,
    #[serde(rename = "C")]
    pub classes_per_client: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub client_indices: Vec<Vec<usize>>,
}

impl PartitionFile {
    pub fn from_partition(partition: &Partition) -> Self {
        let spec = partition.spec();
        let dirichlet = spec.map(|s| s.kind) == Some(PartitionKind::ExtendedDirichlet);
        Self {
            clients: partition.num_clients(),
            classes_per_client: spec.filter(|_| dirichlet).map(|s| s.classes_per_client),
            alpha: spec.filter(|_| dirichlet).map(|s| s.alpha),
            seed: spec.map(|s| s.seed).unwrap_or(0),
            client_indices: partition.client_indices().to_vec(),
        }
    }

    /// Rebuild the partition over `dataset`, recomputing sizes and
    /// distributions from the stored index sets.
    pub fn into_partition(self, dataset: &LabeledDataset) -> Result<Partition> {
        let spec = match (self.classes_per_client, self.alpha) {
            (Some(c), Some(a)) => Some(PartitionSpec::extended_dirichlet(
                self.clients,
                c,
                a,
                self.seed,
            )),
            _ => Some(PartitionSpec::iid(self.clients, self.seed)),
        };
        if self.client_indices.len() != self.clients {
            return Err(Error::ShapeMismatch(format!(
                "file declares {} clients but carries {} index sets",
                self.clients,
                self.client_indices.len()
            )));
        }
        let partition = Partition::build(self.client_indices, dataset, false, spec)?;
        partition.validate(dataset)?;
        Ok(partition)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}
