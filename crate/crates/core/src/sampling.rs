//! Per-step local batch-size schedules (GPSL, FLS, FPLS) and the actual
//! index draws, with client depletion tracked across an epoch.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::rng;

/// Batch sampling strategy. `Centralized` pools all data at the server and is
/// only meaningful for training baselines, not for client schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Gpsl,
    Fls,
    Fpls,
    #[serde(rename = "cl")]
    Centralized,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Strategy::Gpsl => "gpsl",
            Strategy::Fls => "fls",
            Strategy::Fpls => "fpls",
            Strategy::Centralized => "cl",
        };
        f.write_str(name)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gpsl" => Ok(Strategy::Gpsl),
            "fls" => Ok(Strategy::Fls),
            "fpls" => Ok(Strategy::Fpls),
            "cl" | "centralized" => Ok(Strategy::Centralized),
            other => Err(Error::InvalidConfig(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Per-step local batch sizes for one epoch, one inner vector per step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub strategy: Strategy,
    #[serde(rename = "B")]
    pub global_target: usize,
    pub seed: u64,
    pub steps: Vec<Vec<usize>>,
}

impl BatchSchedule {
    pub fn num_clients(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    /// Number of steps with a non-empty global batch.
    pub fn steps_per_epoch(&self) -> usize {
        self.steps
            .iter()
            .filter(|step| step.iter().sum::<usize>() >= 1)
            .count()
    }

    pub fn global_size(&self, step: usize) -> usize {
        self.steps[step].iter().sum()
    }

    /// Total samples each client contributes over the epoch.
    pub fn per_client_totals(&self) -> Vec<usize> {
        let clients = self.num_clients();
        let mut totals = vec![0usize; clients];
        for step in &self.steps {
            for (k, &b) in step.iter().enumerate() {
                totals[k] += b;
            }
        }
        totals
    }

    /// Check the schedule can be served by clients of the given sizes. GPSL
    /// schedules must consume every client exactly; fixed-local schedules must
    /// never overdraw.
    pub fn validate_against(&self, client_sizes: &[usize]) -> Result<()> {
        if self.num_clients() != client_sizes.len() {
            return Err(Error::ScheduleMismatch(format!(
                "schedule has {} clients, partition has {}",
                self.num_clients(),
                client_sizes.len()
            )));
        }
        let totals = self.per_client_totals();
        for (k, (&total, &size)) in totals.iter().zip(client_sizes).enumerate() {
            let exact = self.strategy == Strategy::Gpsl;
            if total > size || (exact && total != size) {
                return Err(Error::ScheduleMismatch(format!(
                    "client {k} contributes {total} samples but holds {size}"
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// Number of non-empty global batches in the schedule.
pub fn steps_per_epoch(schedule: &BatchSchedule) -> usize {
    schedule.steps_per_epoch()
}

/// Dispatch to the strategy's schedule builder.
pub fn schedule(
    strategy: Strategy,
    client_sizes: &[usize],
    global_batch: usize,
    seed: u64,
) -> Result<BatchSchedule> {
    match strategy {
        Strategy::Gpsl => gpsl_schedule(client_sizes, global_batch, seed),
        Strategy::Fls => fls_schedule(client_sizes, global_batch),
        Strategy::Fpls => fpls_schedule(client_sizes, global_batch),
        Strategy::Centralized => Err(Error::InvalidConfig(
            "centralized training has no client schedule".into(),
        )),
    }
}

/// Server-driven global sampling: each step performs up to `global_batch`
/// categorical draws weighted by the clients' remaining counts, decrementing
/// the drawn client. The remaining counts carry across steps, so over the
/// epoch every client is consumed exactly and each global batch is a uniform
/// without-replacement draw from the pool.
pub fn gpsl_schedule(
    client_sizes: &[usize],
    global_batch: usize,
    seed: u64,
) -> Result<BatchSchedule> {
    if global_batch < 1 {
        return Err(Error::InvalidBatchSize);
    }
    let mut remaining = client_sizes.to_vec();
    let mut total: usize = remaining.iter().sum();
    if total == 0 {
        return Err(Error::EmptyPool);
    }
    let mut draw_rng = rng::stream(seed, "gpsl-schedule", 0);
    let mut steps = Vec::with_capacity(total.div_ceil(global_batch));
    while total > 0 {
        let draws = global_batch.min(total);
        let mut counts = vec![0usize; remaining.len()];
        for _ in 0..draws {
            // One uniform variate per draw; the client is located by walking
            // the cumulative remaining counts, i.e. inverse-CDF sampling with
            // exact integer weights.
            let mut x = draw_rng.random_range(0..total);
            let mut client = 0;
            while x >= remaining[client] {
                x -= remaining[client];
                client += 1;
            }
            counts[client] += 1;
            remaining[client] -= 1;
            total -= 1;
        }
        steps.push(counts);
    }
    Ok(BatchSchedule {
        strategy: Strategy::Gpsl,
        global_target: global_batch,
        seed,
        steps,
    })
}

/// Fixed local sampling: every client contributes `ceil(B / K)` per step,
/// clipped at its remainder, until all clients are depleted.
pub fn fls_schedule(client_sizes: &[usize], global_batch: usize) -> Result<BatchSchedule> {
    if global_batch < 1 {
        return Err(Error::InvalidBatchSize);
    }
    if client_sizes.iter().sum::<usize>() == 0 {
        return Err(Error::EmptyPool);
    }
    let per_client = global_batch.div_ceil(client_sizes.len());
    fixed_schedule(Strategy::Fls, client_sizes, global_batch, |_, _| per_client)
}

/// Fixed proportional sampling: client `k` contributes
/// `ceil(B * D_k / D_0)` per step, clipped at its remainder, with the
/// proportions frozen at the original sizes for the whole epoch.
pub fn fpls_schedule(client_sizes: &[usize], global_batch: usize) -> Result<BatchSchedule> {
    if global_batch < 1 {
        return Err(Error::InvalidBatchSize);
    }
    let pool: usize = client_sizes.iter().sum();
    if pool == 0 {
        return Err(Error::EmptyPool);
    }
    fixed_schedule(Strategy::Fpls, client_sizes, global_batch, |_, size| {
        fpls_local_batch(global_batch, size, pool)
    })
}

/// `ceil(B * D_k / D_0)` in integer arithmetic.
pub fn fpls_local_batch(global_batch: usize, client_size: usize, pool: usize) -> usize {
    ((global_batch as u128 * client_size as u128).div_ceil(pool as u128)) as usize
}

fn fixed_schedule(
    strategy: Strategy,
    client_sizes: &[usize],
    global_batch: usize,
    base: impl Fn(usize, usize) -> usize,
) -> Result<BatchSchedule> {
    let mut remaining = client_sizes.to_vec();
    let mut total: usize = remaining.iter().sum();
    let mut steps = Vec::new();
    while total > 0 {
        let mut counts = vec![0usize; remaining.len()];
        for (k, rem) in remaining.iter_mut().enumerate() {
            let take = base(k, client_sizes[k]).min(*rem);
            counts[k] = take;
            *rem -= take;
            total -= take;
        }
        steps.push(counts);
    }
    Ok(BatchSchedule {
        strategy,
        global_target: global_batch,
        seed: 0,
        steps,
    })
}

/// Remaining not-yet-used sample indices per client within an epoch.
#[derive(Debug, Clone)]
pub struct DepletionState {
    remaining_indices: Vec<Vec<usize>>,
}

impl DepletionState {
    pub fn new(client_indices: Vec<Vec<usize>>) -> Self {
        Self {
            remaining_indices: client_indices,
        }
    }

    pub fn from_partition(partition: &Partition) -> Self {
        Self::new(partition.client_indices().to_vec())
    }

    pub fn num_clients(&self) -> usize {
        self.remaining_indices.len()
    }

    pub fn remaining(&self, client: usize) -> usize {
        self.remaining_indices[client].len()
    }

    pub fn total_remaining(&self) -> usize {
        self.remaining_indices.iter().map(Vec::len).sum()
    }

    /// Draw `count` indices uniformly without replacement from the client's
    /// remaining samples, removing them from the state.
    pub fn draw_local_batch(
        &mut self,
        client: usize,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let pool = &mut self.remaining_indices[client];
        if count > pool.len() {
            return Err(Error::ClientDepleted {
                client,
                requested: count,
                remaining: pool.len(),
            });
        }
        let mut drawn = Vec::with_capacity(count);
        for _ in 0..count {
            let at = rng.random_range(0..pool.len());
            drawn.push(pool.swap_remove(at));
        }
        Ok(drawn)
    }
}
