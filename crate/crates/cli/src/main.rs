//! `splitsim`: partition, schedule, bound, analyze, train, compare.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics (and
//! timing) go to stderr; data goes to files or stdout. Every subcommand has a
//! `--json` machine-readable stdout mode. Output files never depend on the
//! clock, so identical invocations produce byte-identical files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use splitsim_core::deviation::DEFAULT_SMOOTHING_FACTOR;
use splitsim_core::{
    analyze_schedule, compare_strategies, extended_dirichlet_partition, iid_partition,
    run_experiment, serfling_union_bound, BatchSchedule, BoundInputs, ComparisonTable, Error,
    ExperimentConfig, Partition, PartitionFile, PartitionKind, PartitionSpec, Strategy,
    SyntheticSpec,
};

/// Environment variable read when a subcommand needs an output directory and
/// none is given.
const OUT_DIR_ENV: &str = "SPLITSIM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "splitsim",
    version,
    about = "Parallel split learning batch-sampling simulator",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an IID or extended-Dirichlet client partition over a synthetic dataset
    Partition(PartitionArgs),
    /// Generate a per-step local batch-size schedule
    Schedule(ScheduleArgs),
    /// Evaluate the closed-form deviation tail bound
    Bound(BoundArgs),
    /// Measure batch deviation along a schedule and estimate tail probabilities
    Analyze(AnalyzeArgs),
    /// Train a split model per an experiment config and write reports
    Train(TrainArgs),
    /// Run a strategy comparison grid and tabulate the results
    Compare(CompareArgs),
}

#[derive(Args)]
struct PartitionArgs {
    /// Synthetic dataset spec (JSON file)
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Partition kind: iid or dirichlet
    #[arg(long, default_value = "iid")]
    kind: PartitionKind,
    /// Number of clients
    #[arg(long)]
    clients: usize,
    /// Distinct classes per client (dirichlet only)
    #[arg(long, default_value_t = 2)]
    classes_per_client: usize,
    /// Dirichlet concentration (dirichlet only)
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    /// RNG seed
    #[arg(long)]
    seed: u64,
    /// Output file; stdout when omitted
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Machine-readable stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Sampling strategy: gpsl, fls or fpls
    #[arg(long)]
    strategy: Strategy,
    /// Global batch size B
    #[arg(long)]
    global_batch: usize,
    /// Partition file to take client sizes from
    #[arg(long, value_name = "FILE", conflicts_with = "sizes")]
    partition: Option<PathBuf>,
    /// Client sizes, comma separated (alternative to --partition)
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// RNG seed
    #[arg(long)]
    seed: u64,
    /// Output file; stdout when omitted
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Machine-readable stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BoundArgs {
    /// Per-class deviation epsilon
    #[arg(long)]
    eps: f64,
    /// Batch size B
    #[arg(long)]
    batch: usize,
    /// Pool size D0
    #[arg(long)]
    pool: usize,
    /// Number of classes M
    #[arg(long)]
    classes: usize,
    /// Machine-readable stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Schedule file
    #[arg(long, value_name = "FILE")]
    schedule: PathBuf,
    /// Partition file
    #[arg(long, value_name = "FILE")]
    partition: PathBuf,
    /// Synthetic dataset spec the partition was built over (JSON file)
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Monte Carlo trials for the tail estimates
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Epsilon grid for tail estimation, comma separated
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    eps_grid: Vec<f64>,
    /// Exponential-moving-average smoothing factor for the deviation curve
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_FACTOR)]
    smoothing: f64,
    /// RNG seed
    #[arg(long)]
    seed: u64,
    /// Report output file (JSON)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Per-step deviation CSV; defaults to the report path with .csv
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Machine-readable stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON file)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the config's strategy
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Override the config's global batch size
    #[arg(long)]
    global_batch: Option<usize>,
    /// Override the config's epoch count
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the config's seed list, comma separated
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Report directory; falls back to the config, then SPLITSIM_OUT_DIR
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Machine-readable stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Comparison grid config (JSON file)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Report directory; falls back to the config's base, then SPLITSIM_OUT_DIR
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Machine-readable stdout
    #[arg(long)]
    json: bool,
}

/// Grid config consumed by `compare`: the base experiment is expanded
/// over strategies x clients x batches. Centralized cells ignore the client
/// grid and run once per batch size.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CompareConfig {
    base: ExperimentConfig,
    strategies: Vec<Strategy>,
    clients: Vec<usize>,
    batches: Vec<usize>,
}

impl CompareConfig {
    fn expand(&self) -> Vec<ExperimentConfig> {
        let mut configs = Vec::new();
        for &strategy in &self.strategies {
            for &batch in &self.batches {
                let clients: &[usize] = if strategy == Strategy::Centralized {
                    &[1]
                } else {
                    &self.clients
                };
                for &k in clients {
                    let mut config = self.base.clone();
                    config.strategy = strategy;
                    config.global_batch = batch;
                    config.partition.clients = k;
                    configs.push(config);
                }
            }
        }
        configs
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap renders help/version on stdout with exit 0; usage errors
            // go to stderr with exit 1.
            if err.use_stderr() {
                eprint!("{err}");
                return ExitCode::from(1);
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Partition(args) => cmd_partition(args),
        Command::Schedule(args) => cmd_schedule(args),
        Command::Bound(args) => cmd_bound(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Train(args) => cmd_train(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn load_dataset(path: &Path) -> Result<(SyntheticSpec, splitsim_core::LabeledDataset), Error> {
    let spec: SyntheticSpec = splitsim_core::io::read_json(path)?;
    let dataset = spec.generate()?;
    Ok((spec, dataset))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json("serializing stdout output", e))?;
    println!("{text}");
    Ok(())
}

fn cmd_partition(args: PartitionArgs) -> Result<(), Error> {
    let (_, dataset) = load_dataset(&args.dataset)?;
    let partition: Partition = match args.kind {
        PartitionKind::Iid => iid_partition(&dataset, args.clients, args.seed)?,
        PartitionKind::ExtendedDirichlet => {
            let spec = PartitionSpec::extended_dirichlet(
                args.clients,
                args.classes_per_client,
                args.alpha,
                args.seed,
            );
            extended_dirichlet_partition(&dataset, &spec)?
        }
    };
    if partition.truncated() {
        eprintln!(
            "warning: some class budgets ran out; not every client holds the full class count"
        );
    }
    let file = PartitionFile::from_partition(&partition);
    match &args.out {
        Some(path) => {
            file.write(path)?;
            if args.json {
                print_json(&serde_json::json!({
                    "out": path,
                    "clients": partition.num_clients(),
                    "client_sizes": partition.client_sizes(),
                    "truncated": partition.truncated(),
                }))?;
            } else {
                eprintln!(
                    "partition: {} clients over {} samples -> {}",
                    partition.num_clients(),
                    partition.pool_size(),
                    path.display()
                );
            }
        }
        None => print_json(&file)?,
    }
    Ok(())
}

fn cmd_schedule(args: ScheduleArgs) -> Result<(), Error> {
    let sizes: Vec<usize> = match (&args.partition, &args.sizes) {
        (Some(path), None) => PartitionFile::read(path)?
            .client_indices
            .iter()
            .map(Vec::len)
            .collect(),
        (None, Some(sizes)) => sizes.clone(),
        _ => {
            return Err(Error::InvalidConfig(
                "exactly one of --partition and --sizes is required".into(),
            ))
        }
    };
    let schedule = splitsim_core::schedule(args.strategy, &sizes, args.global_batch, args.seed)?;
    match &args.out {
        Some(path) => {
            schedule.write(path)?;
            if args.json {
                print_json(&serde_json::json!({
                    "out": path,
                    "strategy": schedule.strategy,
                    "steps": schedule.steps_per_epoch(),
                }))?;
            } else {
                eprintln!(
                    "schedule: {} steps for {} clients -> {}",
                    schedule.steps_per_epoch(),
                    sizes.len(),
                    path.display()
                );
            }
        }
        None => print_json(&schedule)?,
    }
    Ok(())
}

fn cmd_bound(args: BoundArgs) -> Result<(), Error> {
    let inputs = BoundInputs {
        epsilon: args.eps,
        batch: args.batch,
        pool: args.pool,
        classes: args.classes,
    };
    let bound = serfling_union_bound(&inputs)?;
    if args.json {
        print_json(&serde_json::json!({
            "inputs": inputs,
            "clipped": bound.clipped,
            "raw": bound.raw,
            "exponent": bound.exponent,
        }))?;
    } else {
        println!("{:e}", bound.clipped);
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let (_, dataset) = load_dataset(&args.dataset)?;
    let partition = PartitionFile::read(&args.partition)?.into_partition(&dataset)?;
    let schedule = BatchSchedule::read(&args.schedule)?;
    let report = analyze_schedule(
        &schedule,
        &partition,
        &dataset,
        args.trials,
        &args.eps_grid,
        args.smoothing,
        args.seed,
    )?;
    splitsim_core::io::write_json(&args.out, &report)?;

    let csv_path = args
        .csv
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    let mut csv = String::from("step,delta,delta_smoothed\n");
    for (i, (&delta, &smoothed)) in report
        .per_step_delta
        .iter()
        .zip(&report.smoothed_delta)
        .enumerate()
    {
        csv.push_str(&format!("{},{:?},{:?}\n", i + 1, delta, smoothed));
    }
    std::fs::write(&csv_path, csv)
        .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;

    if args.json {
        print_json(&report)?;
    } else {
        eprintln!(
            "analyze: {} steps, mean deviation {:.4} -> {} / {}",
            report.per_step_delta.len(),
            report.mean_delta,
            args.out.display(),
            csv_path.display()
        );
    }
    Ok(())
}

fn resolve_out_dir(flag: Option<PathBuf>, config: Option<PathBuf>) -> Result<PathBuf, Error> {
    flag.or(config)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no output directory: pass --out-dir, set output_dir in the config, or set {OUT_DIR_ENV}"
            ))
        })
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut config = ExperimentConfig::read(&args.config)?;
    if let Some(strategy) = args.strategy {
        config.strategy = strategy;
    }
    if let Some(batch) = args.global_batch {
        config.global_batch = batch;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    let out_dir = resolve_out_dir(args.out_dir, config.output_dir.clone())?;
    config.output_dir = Some(out_dir.clone());

    let report = run_experiment(&config)?;
    report.write(&out_dir)?;
    eprintln!("train: finished in {:.2}s", report.wall_time_secs);
    if args.json {
        print_json(&report)?;
    } else {
        let std = report
            .std_accuracy
            .map_or("n/a".to_string(), |s| format!("{s:.4}"));
        println!(
            "{} K={} B={}: accuracy {:.4} +- {} over {} seeds, {:.1} steps/epoch -> {}",
            config.strategy,
            config.partition.clients,
            config.global_batch,
            report.mean_accuracy,
            std,
            config.seeds.len(),
            report.mean_steps_per_epoch,
            out_dir.display()
        );
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), Error> {
    let grid: CompareConfig = splitsim_core::io::read_json(&args.config)?;
    let out_dir = resolve_out_dir(args.out_dir, grid.base.output_dir.clone())?;
    let mut configs = grid.expand();
    for config in &mut configs {
        config.output_dir = None;
    }
    let (table, reports) = compare_strategies(&configs)?;

    table.write(&out_dir.join("comparison.json"))?;
    for (config, report) in configs.iter().zip(&reports) {
        let cell = format!(
            "cell_{}_K{}_B{}",
            config.strategy, config.partition.clients, config.global_batch
        );
        report.write(&out_dir.join(cell))?;
    }
    for row in &table.rows {
        eprintln!(
            "compare: {} K={} B={} took {:.2}s",
            row.strategy, row.clients, row.global_batch, row.wall_time_secs
        );
    }
    if args.json {
        print_json(&table)?;
    } else {
        print_table(&table);
    }
    Ok(())
}

fn print_table(table: &ComparisonTable) {
    println!(
        "{:<6} {:>6} {:>6} {:>10} {:>10} {:>10} {:>12} {:>12}",
        "method", "K", "B", "acc", "acc_std", "deviation", "steps/epoch", "eff_batch"
    );
    for row in &table.rows {
        let std = row
            .std_accuracy
            .map_or("n/a".to_string(), |s| format!("{s:.4}"));
        println!(
            "{:<6} {:>6} {:>6} {:>10.4} {:>10} {:>10.4} {:>12.1} {:>12.1}",
            row.strategy.to_string(),
            row.clients,
            row.global_batch,
            row.mean_accuracy,
            std,
            row.mean_deviation,
            row.mean_steps_per_epoch,
            row.mean_first_step_global_batch
        );
    }
}
