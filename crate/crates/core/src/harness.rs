//! End-to-end experiment runner: configure, train across seeds, evaluate,
//! aggregate, and persist machine-readable reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, SyntheticSpec};
use crate::deviation::{mean, sample_std};
use crate::engine::{
    centralized_train_epoch, evaluate, train_epoch, Architecture, GradientWeighting,
    OptimizerConfig, SplitModel,
};
use crate::error::{Error, Result};
use crate::partition::{
    extended_dirichlet_partition, iid_partition, Partition, PartitionKind, PartitionSpec,
};
use crate::rng;
use crate::sampling::{schedule, Strategy};

/// Partition settings without a seed; per-run seeds are derived from the
/// experiment seeds so every strategy sees the same partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSettings {
    pub kind: PartitionKind,
    pub clients: usize,
    #[serde(default)]
    pub classes_per_client: usize,
    #[serde(default)]
    pub alpha: f64,
}

impl PartitionSettings {
    pub fn build(&self, dataset: &LabeledDataset, seed: u64) -> Result<Partition> {
        match self.kind {
            PartitionKind::Iid => iid_partition(dataset, self.clients, seed),
            PartitionKind::ExtendedDirichlet => {
                let spec = PartitionSpec::extended_dirichlet(
                    self.clients,
                    self.classes_per_client,
                    self.alpha,
                    seed,
                );
                extended_dirichlet_partition(dataset, &spec)
            }
        }
    }
}

/// A full experiment: dataset, partition, strategy, batch size, epochs,
/// optimizer, seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: SyntheticSpec,
    pub partition: PartitionSettings,
    pub strategy: Strategy,
    pub global_batch: usize,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub group_norm: bool,
    #[serde(default)]
    pub gradient_weighting: GradientWeighting,
    /// Held-out test samples per class; defaults to a fifth of the training
    /// count.
    #[serde(default)]
    pub test_per_class: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_hidden_layers() -> Vec<usize> {
    vec![32, 32]
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.optimizer.validate()?;
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed".into()));
        }
        if self.global_batch < 1 {
            return Err(Error::InvalidBatchSize);
        }
        if self.global_batch > self.dataset.classes * self.dataset.per_class_count {
            return Err(Error::InvalidConfig(
                "global batch exceeds the pool size".into(),
            ));
        }
        if self.hidden_layers.is_empty() {
            return Err(Error::InvalidConfig("at least one hidden layer".into()));
        }
        if self.partition.clients == 0 {
            return Err(Error::InvalidConfig("at least one client".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::mlp(
            self.dataset.feature_dim,
            &self.hidden_layers,
            self.dataset.classes,
            self.group_norm,
        )
    }

    fn resolved_test_per_class(&self) -> usize {
        self.test_per_class
            .unwrap_or_else(|| (self.dataset.per_class_count / 5).max(1))
    }

    /// The held-out test set: same mixture, fresh sample noise.
    pub fn test_set(&self) -> Result<LabeledDataset> {
        let mut spec = self.dataset.clone();
        spec.per_class_count = self.resolved_test_per_class();
        spec.generate_with_seed(rng::derive_seed(self.dataset.seed, "test-samples", 0))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// One per-step measurement row; persisted as CSV, not JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub deviation: f64,
    pub global_batch_size: usize,
}

/// Everything measured for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub final_accuracy: f64,
    pub accuracy_curve: Vec<f64>,
    pub total_steps: usize,
    pub first_epoch_steps: usize,
    pub first_step_global_batch: usize,
    pub mean_deviation: f64,
    /// Per-step rows live in the CSV curves, not in the JSON summary.
    #[serde(skip)]
    pub step_records: Vec<StepRecord>,
}

/// Aggregated result of one experiment across its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedRun>,
    pub mean_accuracy: f64,
    /// Absent when fewer than two seeds were run.
    pub std_accuracy: Option<f64>,
    pub mean_deviation: f64,
    pub mean_steps_per_epoch: f64,
    /// Measured compute time; deliberately excluded from serialized reports
    /// so identical runs produce identical files.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Persist `config.json`, `summary.json` and `curves/seed<N>.csv` under
    /// `dir`. Wall time never reaches the files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("curves"))
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.config.write(&dir.join("config.json"))?;
        crate::io::write_json(&dir.join("summary.json"), self)?;
        for run in &self.per_seed {
            let path = dir.join("curves").join(format!("seed{}.csv", run.seed));
            let mut writer = csv::Writer::from_path(&path)
                .map_err(|e| Error::csv(format!("opening {}", path.display()), e))?;
            writer
                .write_record(["epoch", "step", "loss", "deviation", "accuracy"])
                .map_err(|e| Error::csv(format!("writing {}", path.display()), e))?;
            for record in &run.step_records {
                let accuracy = run.accuracy_curve[record.epoch - 1];
                writer
                    .write_record([
                        record.epoch.to_string(),
                        record.step.to_string(),
                        format!("{:?}", record.loss),
                        format!("{:?}", record.deviation),
                        format!("{accuracy:?}"),
                    ])
                    .map_err(|e| Error::csv(format!("writing {}", path.display()), e))?;
            }
            writer
                .flush()
                .map_err(|e| Error::io(format!("flushing {}", path.display()), e))?;
        }
        Ok(())
    }
}

/// Train and evaluate one configuration for every seed; seeds run in
/// parallel, each fully deterministic in its own derived streams.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let train_set = config.dataset.generate()?;
    let test_set = config.test_set()?;
    let architecture = config.architecture()?;

    let per_seed: Vec<SeedRun> = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, &train_set, &test_set, &architecture, seed))
        .collect::<Result<_>>()?;

    let finals: Vec<f64> = per_seed.iter().map(|r| r.final_accuracy).collect();
    let deviations: Vec<f64> = per_seed.iter().map(|r| r.mean_deviation).collect();
    let steps: Vec<f64> = per_seed
        .iter()
        .map(|r| r.total_steps as f64 / config.epochs as f64)
        .collect();
    Ok(RunReport {
        config: config.clone(),
        mean_accuracy: mean(&finals),
        std_accuracy: (finals.len() >= 2).then(|| sample_std(&finals)),
        mean_deviation: mean(&deviations),
        mean_steps_per_epoch: mean(&steps),
        per_seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

fn run_seed(
    config: &ExperimentConfig,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    architecture: &Architecture,
    seed: u64,
) -> Result<SeedRun> {
    let centralized = config.strategy == Strategy::Centralized;
    let partition = if centralized {
        Partition::single(train_set)?
    } else {
        config
            .partition
            .build(train_set, rng::derive_seed(seed, "partition", 0))?
    };
    let clients = partition.num_clients();
    let mut model = SplitModel::new(
        architecture.clone(),
        clients,
        rng::derive_seed(seed, "model", 0),
    )?;
    let mut opt = model.optimizer_state(config.optimizer);

    let mut accuracy_curve = Vec::with_capacity(config.epochs);
    let mut step_records = Vec::new();
    let mut total_steps = 0;
    let mut first_epoch_steps = 0;
    let mut first_step_global_batch = 0;
    let mut deviation_sum = 0.0;

    for epoch in 1..=config.epochs {
        let epoch_seed = rng::derive_seed(seed, "epoch", epoch as u64);
        let traces = if centralized {
            centralized_train_epoch(
                &mut model,
                &mut opt,
                train_set,
                config.global_batch,
                epoch_seed,
            )?
        } else {
            let epoch_schedule = schedule(
                config.strategy,
                partition.client_sizes(),
                config.global_batch,
                rng::derive_seed(seed, "schedule", epoch as u64),
            )?;
            train_epoch(
                &mut model,
                &mut opt,
                train_set,
                &partition,
                &epoch_schedule,
                epoch_seed,
                config.gradient_weighting,
            )?
        };
        if epoch == 1 {
            first_epoch_steps = traces.len();
            first_step_global_batch = traces.first().map_or(0, |t| t.global_batch_size);
        }
        total_steps += traces.len();
        for trace in &traces {
            deviation_sum += trace.l1_deviation;
            step_records.push(StepRecord {
                epoch,
                step: trace.step,
                loss: trace.loss,
                deviation: trace.l1_deviation,
                global_batch_size: trace.global_batch_size,
            });
        }
        accuracy_curve.push(evaluate(&model, test_set)?);
    }

    Ok(SeedRun {
        seed,
        final_accuracy: *accuracy_curve.last().unwrap(),
        accuracy_curve,
        total_steps,
        first_epoch_steps,
        first_step_global_batch,
        mean_deviation: deviation_sum / total_steps as f64,
        step_records,
    })
}

/// One cell of the strategy comparison, keyed by (strategy, clients, batch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub clients: usize,
    pub global_batch: usize,
    pub seed_count: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: Option<f64>,
    pub mean_deviation: f64,
    pub mean_steps_per_epoch: f64,
    pub mean_first_step_global_batch: f64,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

/// Run every configuration and tabulate. All configs must share the dataset,
/// seeds, epochs and optimizer so the cells are comparable.
pub fn compare_strategies(
    configs: &[ExperimentConfig],
) -> Result<(ComparisonTable, Vec<RunReport>)> {
    let first = configs
        .first()
        .ok_or_else(|| Error::InvalidConfig("no configurations".into()))?;
    for config in configs {
        if config.dataset != first.dataset {
            return Err(Error::InvalidConfig(
                "configurations disagree on the dataset spec".into(),
            ));
        }
        if config.seeds != first.seeds {
            return Err(Error::InvalidConfig(
                "configurations disagree on the seed list".into(),
            ));
        }
        if config.epochs != first.epochs || config.optimizer != first.optimizer {
            return Err(Error::InvalidConfig(
                "configurations disagree on epochs or optimizer".into(),
            ));
        }
    }
    let mut rows = Vec::with_capacity(configs.len());
    let mut reports = Vec::with_capacity(configs.len());
    for config in configs {
        let report = run_experiment(config)?;
        rows.push(ComparisonRow {
            strategy: config.strategy,
            clients: config.partition.clients,
            global_batch: config.global_batch,
            seed_count: config.seeds.len(),
            mean_accuracy: report.mean_accuracy,
            std_accuracy: report.std_accuracy,
            mean_deviation: report.mean_deviation,
            mean_steps_per_epoch: report.mean_steps_per_epoch,
            mean_first_step_global_batch: mean(
                &report
                    .per_seed
                    .iter()
                    .map(|r| r.first_step_global_batch as f64)
                    .collect::<Vec<_>>(),
            ),
            wall_time_secs: report.wall_time_secs,
        });
        reports.push(report);
    }
    Ok((ComparisonTable { rows }, reports))
}
