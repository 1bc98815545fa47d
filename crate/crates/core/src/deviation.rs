//! Batch deviation, concentration bounds, the rounding-bias decomposition,
//! empirical tail probabilities, and the exact enumeration oracle for
//! without-replacement composition laws.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::partition::{class_counts, ClassDistribution, Partition};
use crate::rng;
use crate::sampling::{fpls_local_batch, Strategy};

/// Largest subset count the enumeration oracle will walk.
pub const ORACLE_SUBSET_LIMIT: u64 = 10_000_000;

/// l1 distance between the batch's class fractions and the pool distribution.
/// Ranges over [0, 2].
pub fn l1_deviation(batch_labels: &[usize], pool: &ClassDistribution) -> Result<f64> {
    if batch_labels.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let counts = class_counts(batch_labels, pool.num_classes())?;
    Ok(l1_deviation_from_counts(&counts, pool))
}

fn l1_deviation_from_counts(counts: &[usize], pool: &ClassDistribution) -> f64 {
    let batch: usize = counts.iter().sum();
    counts
        .iter()
        .zip(pool.probs())
        .map(|(&c, &p)| (c as f64 / batch as f64 - p).abs())
        .sum()
}

/// Inputs of the concentration bound; the constraints keep the
/// finite-population correction positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub epsilon: f64,
    pub batch: usize,
    pub pool: usize,
    pub classes: usize,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 || self.pool < 1 || self.classes < 1 {
            return Err(Error::InvalidBoundInputs(
                "batch, pool and classes must be at least 1".into(),
            ));
        }
        if self.batch > self.pool {
            return Err(Error::InvalidBoundInputs(format!(
                "batch {} exceeds pool {}",
                self.batch, self.pool
            )));
        }
        let max_eps = 1.0 - 1.0 / self.pool as f64;
        if self.epsilon <= 0.0 || self.epsilon.is_nan() || self.epsilon > max_eps {
            return Err(Error::InvalidBoundInputs(format!(
                "epsilon must lie in (0, {max_eps}]"
            )));
        }
        Ok(())
    }
}

/// Tail bound on `Pr(deviation >= classes * epsilon)` for a batch drawn
/// uniformly without replacement: the per-class exponential bound with
/// finite-population correction, union-bounded over the classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SerflingBound {
    /// min(1, raw); the usable probability bound.
    pub clipped: f64,
    /// The unclipped value, for diagnostics.
    pub raw: f64,
    pub exponent: f64,
}

pub fn serfling_union_bound(inputs: &BoundInputs) -> Result<SerflingBound> {
    inputs.validate()?;
    let correction = 1.0 - (inputs.batch as f64 - 1.0) / inputs.pool as f64;
    let exponent = -2.0 * inputs.epsilon * inputs.epsilon * inputs.batch as f64 / correction;
    // Work in log space so huge exponents cannot overflow before the clip.
    let log_raw = (2.0 * inputs.classes as f64).ln() + exponent;
    let raw = log_raw.exp();
    let clipped = if log_raw >= 0.0 { 1.0 } else { raw.min(1.0) };
    Ok(SerflingBound {
        clipped,
        raw,
        exponent,
    })
}

/// The systematic per-class error of fixed proportional batches, with the
/// size-mismatch sum that bounds it and the K/B scale of that sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundingBias {
    /// `ceil(B * D_k / D_0)` per client.
    pub local_batches: Vec<usize>,
    /// The batch-weighted mixture of client class distributions.
    pub mixed_distribution: Vec<f64>,
    /// `|p~_m - beta0_m|` per class.
    pub per_class_bias: Vec<f64>,
    /// `sum_k |B~_k/B - D_k/D_0|`; upper-bounds every per-class bias.
    pub size_mismatch_sum: f64,
    pub k_over_b: f64,
}

pub fn rounding_bias(
    client_sizes: &[usize],
    client_distributions: &[ClassDistribution],
    global_batch: usize,
) -> Result<RoundingBias> {
    if global_batch < 1 {
        return Err(Error::InvalidBatchSize);
    }
    if client_sizes.len() != client_distributions.len() || client_sizes.is_empty() {
        return Err(Error::ShapeMismatch(
            "client sizes and distributions must align".into(),
        ));
    }
    let classes = client_distributions[0].num_classes();
    if client_distributions
        .iter()
        .any(|d| d.num_classes() != classes)
    {
        return Err(Error::ShapeMismatch(
            "client distributions disagree on class count".into(),
        ));
    }
    let pool: usize = client_sizes.iter().sum();
    if pool == 0 {
        return Err(Error::EmptyPool);
    }

    let local_batches: Vec<usize> = client_sizes
        .iter()
        .map(|&size| fpls_local_batch(global_batch, size, pool))
        .collect();

    let mut mixed = vec![0.0; classes];
    let mut pool_dist = vec![0.0; classes];
    let mut size_mismatch_sum = 0.0;
    for ((&size, &local), dist) in client_sizes
        .iter()
        .zip(&local_batches)
        .zip(client_distributions)
    {
        let batch_frac = local as f64 / global_batch as f64;
        let data_frac = size as f64 / pool as f64;
        size_mismatch_sum += (batch_frac - data_frac).abs();
        for (m, &p) in dist.probs().iter().enumerate() {
            mixed[m] += batch_frac * p;
            pool_dist[m] += data_frac * p;
        }
    }
    let per_class_bias: Vec<f64> = mixed
        .iter()
        .zip(&pool_dist)
        .map(|(&a, &b)| (a - b).abs())
        .collect();
    // Triangle inequality with beta_{k,m} <= 1; allow float slack.
    debug_assert!(per_class_bias
        .iter()
        .all(|&b| b <= size_mismatch_sum + 1e-12));

    Ok(RoundingBias {
        local_batches,
        mixed_distribution: mixed,
        per_class_bias,
        size_mismatch_sum,
        k_over_b: client_sizes.len() as f64 / global_batch as f64,
    })
}

/// Monte Carlo estimate of `Pr(deviation >= classes * epsilon)` for the
/// first-step global batch of a freshly scheduled epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub probability: f64,
    pub std_error: f64,
    pub trials: usize,
    pub threshold: f64,
}

pub fn empirical_deviation_tail(
    strategy: Strategy,
    partition: &Partition,
    dataset: &LabeledDataset,
    global_batch: usize,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<TailEstimate> {
    if trials < 1 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let pool_dist = crate::partition::class_distribution(dataset.labels(), dataset.num_classes())?;
    let threshold = dataset.num_classes() as f64 * epsilon;
    let client_labels = client_label_table(partition, dataset);

    // Each trial owns a derived stream, so parallel and serial runs count the
    // same hits.
    let hits: usize = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut trial_rng = rng::stream(seed, "tail-trial", trial);
            let counts =
                first_step_class_counts(strategy, &client_labels, global_batch, &mut trial_rng);
            usize::from(l1_deviation_from_counts(&counts, &pool_dist) >= threshold)
        })
        .sum();

    let p = hits as f64 / trials as f64;
    Ok(TailEstimate {
        probability: p,
        std_error: (p * (1.0 - p) / trials as f64).sqrt(),
        trials,
        threshold,
    })
}

fn client_label_table(partition: &Partition, dataset: &LabeledDataset) -> Vec<Vec<usize>> {
    partition
        .client_indices()
        .iter()
        .map(|indices| indices.iter().map(|&i| dataset.label(i)).collect())
        .collect()
}

/// Class counts of one first-step global batch under the given strategy.
fn first_step_class_counts(
    strategy: Strategy,
    client_labels: &[Vec<usize>],
    global_batch: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let sizes: Vec<usize> = client_labels.iter().map(Vec::len).collect();
    let pool: usize = sizes.iter().sum();
    let classes = client_labels
        .iter()
        .flat_map(|l| l.iter())
        .max()
        .map_or(1, |&m| m + 1);
    let mut counts = vec![0usize; classes];

    let local = |k: usize| -> usize {
        match strategy {
            Strategy::Fls => global_batch.div_ceil(client_labels.len()).min(sizes[k]),
            Strategy::Fpls => fpls_local_batch(global_batch, sizes[k], pool).min(sizes[k]),
            _ => 0,
        }
    };

    match strategy {
        Strategy::Centralized => {
            let flat: Vec<usize> = client_labels.iter().flatten().copied().collect();
            sample_labels_into(&flat, global_batch.min(pool), rng, &mut counts);
        }
        Strategy::Gpsl => {
            let mut remaining = sizes.clone();
            let mut total = pool;
            let mut composition = vec![0usize; remaining.len()];
            for _ in 0..global_batch.min(pool) {
                let mut x = rng.random_range(0..total);
                let mut client = 0;
                while x >= remaining[client] {
                    x -= remaining[client];
                    client += 1;
                }
                composition[client] += 1;
                remaining[client] -= 1;
                total -= 1;
            }
            for (k, &take) in composition.iter().enumerate() {
                sample_labels_into(&client_labels[k], take, rng, &mut counts);
            }
        }
        Strategy::Fls | Strategy::Fpls => {
            for (k, labels) in client_labels.iter().enumerate() {
                sample_labels_into(labels, local(k), rng, &mut counts);
            }
        }
    }
    counts
}

/// Draw `take` labels uniformly without replacement and add them to `counts`.
fn sample_labels_into(labels: &[usize], take: usize, rng: &mut impl Rng, counts: &mut [usize]) {
    if take == 0 {
        return;
    }
    if take >= labels.len() {
        for &l in labels {
            counts[l] += 1;
        }
        return;
    }
    let mut scratch = labels.to_vec();
    for _ in 0..take {
        let at = rng.random_range(0..scratch.len());
        counts[scratch.swap_remove(at)] += 1;
    }
}

/// Exact distribution of the per-group composition when `batch` items are
/// drawn uniformly without replacement from groups of the given sizes,
/// computed by enumerating every subset. This is the independent oracle for
/// the dynamic-sampling law (it equals the multivariate hypergeometric pmf).
pub fn exact_composition_distribution(
    group_sizes: &[usize],
    batch: usize,
) -> Result<BTreeMap<Vec<usize>, f64>> {
    if batch < 1 {
        return Err(Error::InvalidBatchSize);
    }
    let pool: usize = group_sizes.iter().sum();
    if pool == 0 {
        return Err(Error::EmptyPool);
    }
    if batch > pool {
        return Err(Error::InvalidConfig(format!(
            "batch {batch} exceeds pool {pool}"
        )));
    }
    let total = binomial(pool, batch).ok_or(Error::OracleScaleExceeded {
        pool,
        batch,
        limit: ORACLE_SUBSET_LIMIT,
    })?;
    if total > ORACLE_SUBSET_LIMIT as u128 {
        return Err(Error::OracleScaleExceeded {
            pool,
            batch,
            limit: ORACLE_SUBSET_LIMIT,
        });
    }

    let mut owner = Vec::with_capacity(pool);
    for (k, &size) in group_sizes.iter().enumerate() {
        owner.extend(std::iter::repeat_n(k, size));
    }

    let mut tallies: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    let mut combo: Vec<usize> = (0..batch).collect();
    loop {
        let mut composition = vec![0usize; group_sizes.len()];
        for &item in &combo {
            composition[owner[item]] += 1;
        }
        *tallies.entry(composition).or_default() += 1;

        // Advance to the next combination in lexicographic order.
        let mut i = batch;
        while i > 0 && combo[i - 1] == pool - batch + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        combo[i - 1] += 1;
        for j in i..batch {
            combo[j] = combo[j - 1] + 1;
        }
    }

    Ok(tallies
        .into_iter()
        .map(|(comp, count)| (comp, count as f64 / total as f64))
        .collect())
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    let k = k.min(n - k);
    let mut result: u128 = 1;
    for i in 0..k {
        result = result.checked_mul((n - i) as u128)?;
        result /= (i + 1) as u128;
        if result > u64::MAX as u128 {
            return None;
        }
    }
    Some(result)
}

/// Exponential moving average with the given smoothing factor in (0, 1].
pub fn ema_smooth(values: &[f64], factor: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut state = f64::NAN;
    for (i, &v) in values.iter().enumerate() {
        state = if i == 0 {
            v
        } else {
            factor * v + (1.0 - factor) * state
        };
        out.push(state);
    }
    out
}

/// Default smoothing factor for deviation curves.
pub const DEFAULT_SMOOTHING_FACTOR: f64 = 0.1;

/// Tail estimate alongside the closed-form bound at one epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub epsilon: f64,
    pub estimate: TailEstimate,
    /// Absent when the bound's validity constraints exclude this epsilon.
    pub bound_clipped: Option<f64>,
    pub bound_raw: Option<f64>,
}

/// Per-step deviations of one simulated epoch plus tail estimates on an
/// epsilon grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub strategy: Strategy,
    pub global_batch: usize,
    pub seed: u64,
    pub per_step_delta: Vec<f64>,
    pub smoothed_delta: Vec<f64>,
    pub smoothing_factor: f64,
    pub mean_delta: f64,
    pub std_delta: f64,
    pub epsilon_grid: Vec<f64>,
    pub tails: Vec<TailRow>,
}

/// Simulate one epoch of batch draws along `schedule`, recording the l1
/// deviation of every global batch, and estimate tail probabilities for the
/// first step over `trials` fresh epochs.
pub fn analyze_schedule(
    schedule: &crate::sampling::BatchSchedule,
    partition: &Partition,
    dataset: &LabeledDataset,
    trials: usize,
    epsilon_grid: &[f64],
    smoothing_factor: f64,
    seed: u64,
) -> Result<DeviationReport> {
    schedule.validate_against(partition.client_sizes())?;
    let pool_dist = crate::partition::class_distribution(dataset.labels(), dataset.num_classes())?;
    let client_labels = client_label_table(partition, dataset);

    let mut remaining: Vec<Vec<usize>> = client_labels.clone();
    let mut per_step_delta = Vec::with_capacity(schedule.steps.len());
    let mut draw_rngs: Vec<_> = (0..client_labels.len())
        .map(|k| rng::stream(seed, "analyze-draw", k as u64))
        .collect();
    for step in &schedule.steps {
        let mut counts = vec![0usize; dataset.num_classes()];
        for (k, &take) in step.iter().enumerate() {
            let pool = &mut remaining[k];
            if take > pool.len() {
                return Err(Error::ClientDepleted {
                    client: k,
                    requested: take,
                    remaining: pool.len(),
                });
            }
            for _ in 0..take {
                let at = draw_rngs[k].random_range(0..pool.len());
                counts[pool.swap_remove(at)] += 1;
            }
        }
        if counts.iter().sum::<usize>() >= 1 {
            per_step_delta.push(l1_deviation_from_counts(&counts, &pool_dist));
        }
    }

    let mean_delta = mean(&per_step_delta);
    let std_delta = sample_std(&per_step_delta);
    let tails = epsilon_grid
        .iter()
        .enumerate()
        .map(|(i, &epsilon)| {
            let estimate = empirical_deviation_tail(
                schedule.strategy,
                partition,
                dataset,
                schedule.global_target,
                epsilon,
                trials,
                rng::derive_seed(seed, "tail-grid", i as u64),
            )?;
            let bound = serfling_union_bound(&BoundInputs {
                epsilon,
                batch: schedule.global_target,
                pool: dataset.len(),
                classes: dataset.num_classes(),
            })
            .ok();
            Ok(TailRow {
                epsilon,
                estimate,
                bound_clipped: bound.map(|b| b.clipped),
                bound_raw: bound.map(|b| b.raw),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DeviationReport {
        strategy: schedule.strategy,
        global_batch: schedule.global_target,
        seed,
        smoothed_delta: ema_smooth(&per_step_delta, smoothing_factor),
        smoothing_factor,
        per_step_delta,
        mean_delta,
        std_delta,
        epsilon_grid: epsilon_grid.to_vec(),
        tails,
    })
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub(crate) fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}
